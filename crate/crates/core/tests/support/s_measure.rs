//! Structure measure coded directly from its definition on a 2D grid,
//! plus a generator of random prediction/ground-truth pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct Grid {
    h: usize,
    w: usize,
    v: Vec<Vec<f64>>,
}

impl Grid {
    fn new(values: &[f64], h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            v: (0..h).map(|y| values[y * w..(y + 1) * w].to_vec()).collect(),
        }
    }

    fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
        rows.flat_map(|y| cols.clone().map(move |x| (y, x)))
            .map(|(y, x)| self.v[y][x])
            .collect()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 normalization).
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Object similarity of a region: `2 m / (m^2 + 1 + sigma + eps)`.
pub fn oracle_object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    2.0 * m / (m * m + 1.0 + sample_std(values) + f64::EPSILON)
}

pub fn oracle_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0 + f64::EPSILON);
    let syy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0 + f64::EPSILON);
    let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0 + f64::EPSILON);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let p = Grid::new(pred, h, w);
    let g = Grid::new(&gt.iter().map(|&v| f64::from((v > 0.5) as u8)).collect::<Vec<_>>(), h, w);
    let mu = mean(&g.block(0..h, 0..w));
    if mu == 0.0 {
        return (1.0 - mean(&p.block(0..h, 0..w))).clamp(0.0, 1.0);
    }
    if mu == 1.0 {
        return mean(&p.block(0..h, 0..w)).clamp(0.0, 1.0);
    }

    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if g.v[y][x] == 1.0 {
                fg.push(p.v[y][x]);
            } else {
                bg.push(1.0 - p.v[y][x]);
            }
        }
    }
    let s_object = mu * oracle_object(&fg) + (1.0 - mu) * oracle_object(&bg);

    // Centroid with 1-based coordinates; the top-left block spans rows
    // 1..=Y and columns 1..=X.
    let (mut cx, mut cy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..g.h {
        for x in 0..g.w {
            if g.v[y][x] == 1.0 {
                cx += (x + 1) as f64;
                cy += (y + 1) as f64;
                n += 1.0;
            }
        }
    }
    let bx = ((cx / n).round() as usize).min(w);
    let by = ((cy / n).round() as usize).min(h);
    let mut s_region = 0.0;
    for (rows, cols) in [(0..by, 0..bx), (0..by, bx..w), (by..h, 0..bx), (by..h, bx..w)] {
        let area = rows.len() * cols.len();
        if area == 0 {
            continue;
        }
        let weight = area as f64 / (h * w) as f64;
        s_region += weight * oracle_ssim(&p.block(rows.clone(), cols.clone()), &g.block(rows, cols));
    }
    (0.5 * s_object + 0.5 * s_region).clamp(0.0, 1.0)
}

pub fn random_pair(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let h = r.random_range(4..40);
    let w = r.random_range(4..40);
    let gt: Vec<f64> = match r.random_range(0..3) {
        // Filled rectangle.
        0 => {
            let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
            let (y1, x1) = (r.random_range(y0 + 1..=h), r.random_range(x0 + 1..=w));
            (0..h * w)
                .map(|i| f64::from(((y0..y1).contains(&(i / w)) && (x0..x1).contains(&(i % w))) as u8))
                .collect()
        }
        // Disc.
        1 => {
            let (cy, cx) = (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64));
            let rad = r.random_range(1.0..h.max(w) as f64 / 2.0);
            (0..h * w)
                .map(|i| {
                    let (dy, dx) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
                    f64::from((dy * dy + dx * dx <= rad * rad) as u8)
                })
                .collect()
        }
        // Scattered pixels at a random density.
        _ => {
            let p = r.random_range(0.05..0.95);
            (0..h * w).map(|_| f64::from(r.random_bool(p) as u8)).collect()
        }
    };
    let pred: Vec<f64> = match r.random_range(0..3) {
        0 => (0..h * w).map(|_| r.random()).collect(),
        1 => gt.iter().map(|g| (g * 0.7 + r.random_range(0.0..0.3f64)).min(1.0)).collect(),
        _ => (0..h * w).map(|_| f64::from(r.random_bool(0.5) as u8)).collect(),
    };
    (pred, gt, h, w)
}
