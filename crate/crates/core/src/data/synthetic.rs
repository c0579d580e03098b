//! Deterministic synthetic saliency dataset: textured backgrounds with
//! low-contrast distractors and 1-3 high-contrast foreground shapes.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::netpbm;
use super::{Dataset, Sample, MANIFEST};
use crate::error::{Error, Result};
use crate::rng;

/// Foreground fraction enforced on every generated mask.
pub const FG_RANGE: (f64, f64) = (0.05, 0.6);
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug)]
struct Shape2d {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Shape2d {
    fn random(rng: &mut ChaCha8Rng, size: f64, scale: (f64, f64)) -> Self {
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        Shape2d {
            kind,
            cx: rng.random_range(0.2..0.8) * size,
            cy: rng.random_range(0.2..0.8) * size,
            rx: rng.random_range(scale.0..scale.1) * size,
            ry: rng.random_range(scale.0..scale.1) * size,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Whether the pixel center `(x + 0.5, y + 0.5)` lies inside.
    fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        match self.kind {
            ShapeKind::Ellipse => (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.rx && v.abs() <= self.ry,
            ShapeKind::Triangle => {
                // Isosceles: apex at v = -ry, base at v = +ry.
                let t = (v / self.ry + 1.0) / 2.0;
                (0.0..=1.0).contains(&t) && u.abs() <= self.rx * t
            }
        }
    }

    fn raster(&self, size: usize, mask: &mut [bool]) {
        for y in 0..size {
            for x in 0..size {
                if self.contains(x, y) {
                    mask[y * size + x] = true;
                }
            }
        }
    }
}

/// Bilinear upsampling of a `g x g` grid to `size x size` (half-pixel).
fn smooth_field(rng: &mut ChaCha8Rng, grid: usize, size: usize, center: f64, amp: f64) -> Vec<f64> {
    let cells: Vec<f64> = (0..grid * grid)
        .map(|_| center + rng.random_range(-amp..amp))
        .collect();
    let scale = grid as f64 / size as f64;
    let taps = |d: usize| {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = taps(y);
        for x in 0..size {
            let (x0, x1, fx) = taps(x);
            let top = cells[y0 * grid + x0] * (1.0 - fx) + cells[y0 * grid + x1] * fx;
            let bot = cells[y1 * grid + x0] * (1.0 - fx) + cells[y1 * grid + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// A colour whose every channel differs from `base` by at least 0.3.
fn contrasting(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|b| {
        let up = b + rng.random_range(0.3..0.5);
        let down = b - rng.random_range(0.3..0.5);
        if up <= 1.0 && (down < 0.0 || rng.random_bool(0.5)) {
            up
        } else {
            down.max(0.0)
        }
    })
}

/// Generates sample `index` of the dataset with the given seed.
pub fn generate_sample(size: usize, seed: u64, index: usize) -> Sample {
    let mut rng = rng::stream(seed, &format!("{}/{index}", rng::DATA));
    let plane = size * size;
    let sz = size as f64;

    let base = [0; 3].map(|_| rng.random_range(0.25..0.75));
    let mut image = vec![0.0f64; 3 * plane];
    for (c, &b) in base.iter().enumerate() {
        let coarse = smooth_field(&mut rng, 4, size, b, 0.12);
        let fine = smooth_field(&mut rng, 16, size, 0.0, 0.05);
        for i in 0..plane {
            image[c * plane + i] = coarse[i] + fine[i];
        }
    }

    let distractors = rng.random_range(2..=4);
    for _ in 0..distractors {
        let shape = Shape2d::random(&mut rng, sz, (0.04, 0.12));
        let shift = [0; 3].map(|_| rng.random_range(-0.08..0.08));
        let mut m = vec![false; plane];
        shape.raster(size, &mut m);
        for (i, _) in m.iter().enumerate().filter(|(_, &v)| v) {
            for (c, s) in shift.iter().enumerate() {
                image[c * plane + i] += s;
            }
        }
    }

    let mut mask = vec![false; plane];
    for attempt in 0..MAX_ATTEMPTS {
        mask.fill(false);
        let count = rng.random_range(1..=3);
        // Shrink shapes on later attempts if the masks keep coming out too big.
        let hi = if attempt < MAX_ATTEMPTS / 2 { 0.3 } else { 0.18 };
        for _ in 0..count {
            Shape2d::random(&mut rng, sz, (0.1, hi)).raster(size, &mut mask);
        }
        let frac = mask.iter().filter(|&&m| m).count() as f64 / plane as f64;
        if (FG_RANGE.0..=FG_RANGE.1).contains(&frac) {
            break;
        }
        if attempt + 1 == MAX_ATTEMPTS {
            // Fallback: a centred ellipse covering roughly a fifth of the image.
            mask.fill(false);
            let e = Shape2d {
                kind: ShapeKind::Ellipse,
                cx: sz / 2.0,
                cy: sz / 2.0,
                rx: sz * 0.25,
                ry: sz * 0.25,
                angle: 0.0,
            };
            e.raster(size, &mut mask);
        }
    }

    let fg = contrasting(&mut rng, base);
    let tex = smooth_field(&mut rng, 8, size, 0.0, 0.04);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (c, &f) in fg.iter().enumerate() {
            image[c * plane + i] = f + tex[i];
        }
    }

    Sample {
        id: format!("syn_{index:05}"),
        height: size,
        width: size,
        image: image.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        mask: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    }
}

/// Writes `count` samples as `images/*.ppm`, `masks/*.pgm` and a manifest.
pub fn gen_synthetic(count: usize, size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("size {size} must be a positive multiple of 32")));
    }
    let mut manifest = String::new();
    for i in 0..count {
        let s = generate_sample(size, seed, i);
        let img_rel = format!("images/{}.ppm", s.id);
        let mask_rel = format!("masks/{}.pgm", s.id);
        netpbm::write_rgb(
            &out_dir.join(&img_rel),
            &netpbm::RgbImage {
                width: size,
                height: size,
                data: s.image.clone(),
            },
        )?;
        netpbm::write_map(&out_dir.join(&mask_rel), size, size, &s.mask)?;
        manifest.push_str(&format!("{img_rel}\t{mask_rel}\n"));
    }
    let path = out_dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// In-memory dataset without the quantization of a disk round trip.
pub fn in_memory(count: usize, size: usize, seed: u64) -> Dataset {
    Dataset {
        samples: (0..count).map(|i| generate_sample(size, seed, i)).collect(),
    }
}
