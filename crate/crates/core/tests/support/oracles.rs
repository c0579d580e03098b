//! Straight nested-loop versions of the layer kernels and random sweeps that
//! compare them with the library.

use ciisod::nn::{bilinear_resize, conv2d, global_max_pool, max_pool2d};
use ciisod::{ops, rng, Parameter, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Outcome of comparing a kernel with its oracle over random shapes.
#[derive(Clone, Copy, Debug)]
pub struct Sweep {
    pub cases: usize,
    /// Largest absolute forward difference; infinite on a shape mismatch.
    pub max_diff: f64,
    /// Largest absolute input-gradient difference, where checked.
    pub grad_diff: f64,
}

impl Sweep {
    fn new() -> Self {
        Sweep {
            cases: 0,
            max_diff: 0.0,
            grad_diff: 0.0,
        }
    }

    fn record(&mut self, forward: f64, grad: f64) {
        self.cases += 1;
        self.max_diff = self.max_diff.max(forward);
        self.grad_diff = self.grad_diff.max(grad);
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_diff <= tol && self.grad_diff <= tol
    }
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

/// Values on a coarse grid so windows contain ties.
pub fn tied(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(r.random_range(-3i32..=3))).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn idx(s: Shape, n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s.c + c) * s.h + y) * s.w + x
}

#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Shape, Vec<f64>) {
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let os = Shape::new(xs.n, cout, oh, ow);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                let xv = x[idx(xs, n, ci, iy as usize, ix as usize)];
                                acc += xv * w[((co * xs.c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[idx(os, n, co, oy, ox)] = acc;
                }
            }
        }
    }
    (os, out)
}

/// `shapes` random convolutions: kernels 1/3/7, strides 1/2, padding up to
/// half the kernel, with leftover rows the floor rule drops.
pub fn conv_sweep(seed: u64, shapes: usize) -> Sweep {
    let mut r = rng::stream(seed, "oracle/conv");
    let mut sweep = Sweep::new();
    while sweep.cases < shapes {
        let k: usize = [1, 3, 7][r.random_range(0..3)];
        let stride: usize = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let (oh, ow): (usize, usize) = (r.random_range(1..=6), r.random_range(1..=6));
        let h = ((oh - 1) * stride + k).saturating_sub(2 * pad).max(1) + r.random_range(0..stride);
        let w = ((ow - 1) * stride + k).saturating_sub(2 * pad).max(1) + r.random_range(0..stride);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let xs = Shape::new(r.random_range(1..=2), r.random_range(1..=4), h, w);
        let cout = r.random_range(1..=4);
        let x = uniform(&mut r, xs.numel());
        let wv = uniform(&mut r, cout * xs.c * k * k);
        let bias = r.random_bool(0.5).then(|| uniform(&mut r, cout));
        let got = conv2d(
            &Tensor::new(xs, x.clone()),
            &Tensor::new(Shape::new(cout, xs.c, k, k), wv.clone()),
            bias.as_ref().map(|b| Tensor::new(Shape::new(1, cout, 1, 1), b.clone())).as_ref(),
            stride,
            pad,
        );
        let (os, want) = conv_oracle(&x, xs, &wv, cout, k, bias.as_deref(), stride, pad);
        let d = match got {
            Ok(y) if y.shape() == os => max_abs_diff(y.data(), &want),
            _ => f64::INFINITY,
        };
        sweep.record(d, 0.0);
    }
    sweep
}

/// Max pooling forward values and gradient routing, with ties resolved to
/// the first index in row-major window order.
pub fn max_pool_sweep(seed: u64, shapes: usize) -> Sweep {
    let mut r = rng::stream(seed, "oracle/maxpool");
    let mut sweep = Sweep::new();
    for _ in 0..shapes {
        let (k, pad) = [(2, 0), (3, 1)][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let xs = Shape::new(r.random_range(1..=2), r.random_range(1..=3), r.random_range(k..=9), r.random_range(k..=9));
        let x = tied(&mut r, xs.numel());
        let p = Parameter::new("x", &xs.dims(), x.clone());
        let Ok(y) = max_pool2d(&p.tensor(), k, stride, pad) else {
            sweep.record(f64::INFINITY, f64::INFINITY);
            continue;
        };
        let (oh, ow) = ((xs.h + 2 * pad - k) / stride + 1, (xs.w + 2 * pad - k) / stride + 1);
        if y.shape() != Shape::new(xs.n, xs.c, oh, ow) {
            sweep.record(f64::INFINITY, f64::INFINITY);
            continue;
        }
        let up = uniform(&mut r, y.shape().numel());
        let mut want = vec![0.0; y.shape().numel()];
        let mut want_grad = vec![0.0; xs.numel()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best: Option<(f64, usize)> = None;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                let i = idx(xs, n, c, iy as usize, ix as usize);
                                if best.is_none_or(|(b, _)| x[i] > b) {
                                    best = Some((x[i], i));
                                }
                            }
                        }
                        let (v, i) = best.expect("window overlaps the input");
                        let o = idx(y.shape(), n, c, oy, ox);
                        want[o] = v;
                        want_grad[i] += up[o];
                    }
                }
            }
        }
        let forward = max_abs_diff(y.data(), &want);
        ops::weighted_sum(&y, &Tensor::new(y.shape(), up)).unwrap().backward().unwrap();
        sweep.record(forward, max_abs_diff(&p.grad(), &want_grad));
    }
    sweep
}

/// Global max pooling per channel plane, gradient to the first maximum.
pub fn global_max_pool_sweep(seed: u64, shapes: usize) -> Sweep {
    let mut r = rng::stream(seed, "oracle/gmp");
    let mut sweep = Sweep::new();
    for case in 0..shapes {
        let xs = Shape::new(r.random_range(1..=3), r.random_range(1..=5), r.random_range(1..=8), r.random_range(1..=8));
        let x = if case % 2 == 0 {
            tied(&mut r, xs.numel())
        } else {
            uniform(&mut r, xs.numel())
        };
        let p = Parameter::new("x", &xs.dims(), x.clone());
        let y = match global_max_pool(&p.tensor()) {
            Ok(y) if y.shape() == Shape::new(xs.n, xs.c, 1, 1) => y,
            _ => {
                sweep.record(f64::INFINITY, f64::INFINITY);
                continue;
            }
        };
        let up = uniform(&mut r, xs.n * xs.c);
        let mut want = vec![0.0; xs.n * xs.c];
        let mut want_grad = vec![0.0; xs.numel()];
        for (plane, chunk) in x.chunks(xs.plane()).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            want[plane] = chunk[best];
            want_grad[plane * xs.plane() + best] = up[plane];
        }
        let forward = max_abs_diff(y.data(), &want);
        ops::weighted_sum(&y, &Tensor::new(y.shape(), up)).unwrap().backward().unwrap();
        sweep.record(forward, max_abs_diff(&p.grad(), &want_grad));
    }
    sweep
}

/// Half-pixel source coordinate and the two taps it falls between.
pub fn taps(dst: usize, out: usize, inp: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(inp - 1);
    let i1 = (i0 + 1).min(inp - 1);
    (i0, i1, src - i0 as f64)
}

pub fn bilinear_oracle(x: &[f64], xs: Shape, oh: usize, ow: usize) -> Vec<f64> {
    let os = Shape::new(xs.n, xs.c, oh, ow);
    let mut out = vec![0.0; os.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                let (y0, y1, fy) = taps(oy, oh, xs.h);
                for ox in 0..ow {
                    let (x0, x1, fx) = taps(ox, ow, xs.w);
                    let v = |yy, xx| x[idx(xs, n, c, yy, xx)];
                    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                    let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                    out[idx(os, n, c, oy, ox)] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }
    out
}

/// Up- and down-sampling to arbitrary sizes, including non-integer ratios.
pub fn bilinear_sweep(seed: u64, shapes: usize) -> Sweep {
    let mut r = rng::stream(seed, "oracle/resize");
    let mut sweep = Sweep::new();
    for _ in 0..shapes {
        let xs = Shape::new(r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=9), r.random_range(1..=9));
        let (oh, ow) = (r.random_range(1..=20), r.random_range(1..=20));
        let x = uniform(&mut r, xs.numel());
        let want = bilinear_oracle(&x, xs, oh, ow);
        let d = match bilinear_resize(&Tensor::new(xs, x), oh, ow) {
            Ok(y) if y.shape() == Shape::new(xs.n, xs.c, oh, ow) => max_abs_diff(y.data(), &want),
            _ => f64::INFINITY,
        };
        sweep.record(d, 0.0);
    }
    sweep
}

/// Per-channel broadcast product and the gradient of the broadcast operand.
pub fn broadcast_mul_sweep(seed: u64, shapes: usize) -> Sweep {
    let mut r = rng::stream(seed, "oracle/mul");
    let mut sweep = Sweep::new();
    for _ in 0..shapes {
        let s = Shape::new(r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5));
        let a = Parameter::new("a", &s.dims(), uniform(&mut r, s.numel()));
        let b = Parameter::new("b", &[s.n, s.c, 1, 1], uniform(&mut r, s.n * s.c));
        let y = ops::mul(&a.tensor(), &b.tensor()).unwrap();
        let up = uniform(&mut r, s.numel());
        let (av, bv) = (a.values(), b.values());
        let mut want = vec![0.0; s.numel()];
        let mut want_b = vec![0.0; s.n * s.c];
        for i in 0..s.numel() {
            let plane = i / s.plane();
            want[i] = av[i] * bv[plane];
            want_b[plane] += up[i] * av[i];
        }
        let forward = max_abs_diff(y.data(), &want);
        ops::weighted_sum(&y, &Tensor::new(s, up)).unwrap().backward().unwrap();
        sweep.record(forward, max_abs_diff(&b.grad(), &want_b));
    }
    sweep
}
