//! Differentiable layer kernels on `(n, c, h, w)` tensors.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Shape, Tensor};

/// Output extent of a strided window: `floor((len + 2 pad - k) / stride) + 1`.
pub fn window_out(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim(op, "stride must be positive"));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::dim(
            op,
            format!("kernel {k} does not fit input extent {len} with padding {pad}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the image is already its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Float>(&self, img: &[T], col: &mut [T]) {
        let (oh, ow) = (self.oh, self.ow);
        for ci in 0..self.cin {
            let src = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Float>(&self, col: &[T], img: &mut [T]) {
        let (oh, ow) = (self.oh, self.ow);
        for ci in 0..self.cin {
            let dst = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `weight` is `(cout, cin, kh, kw)`, `bias` is `(1, cout, 1, 1)`. The output
/// extent follows the floor rule of [`window_out`].
pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.c {
        return Err(Error::dim(
            "conv2d",
            format!("input {xs} has {} channels, weight {ws} expects {}", xs.c, ws.c),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::dim(
                "conv2d",
                format!("bias {} does not match {} output channels", b.shape(), ws.n),
            ));
        }
    }
    let geom = Arc::new(ConvGeom {
        cin: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        stride,
        pad: padding,
        oh: window_out("conv2d", xs.h, ws.h, stride, padding)?,
        ow: window_out("conv2d", xs.w, ws.w, stride, padding)?,
    });
    let cout = ws.n;
    let (k, p) = (geom.rows(), geom.cols());
    let out_shape = Shape::new(xs.n, cout, geom.oh, geom.ow);
    let in_img = xs.c * xs.h * xs.w;

    let mut out = vec![T::zero(); out_shape.numel()];
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for ni in 0..xs.n {
        let img = &x.data()[ni * in_img..(ni + 1) * in_img];
        let dst = &mut out[ni * cout * p..(ni + 1) * cout * p];
        let cols: &[T] = if geom.is_pointwise() {
            img
        } else {
            geom.im2col(img, &mut col);
            &col
        };
        T::gemm(false, false, cout, p, k, T::one(), weight.data(), cols, T::zero(), dst);
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_mut(p).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    let n = xs.n;
    Ok(Tensor::from_op(
        "conv2d",
        out_shape,
        out,
        inputs,
        Box::new(move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); n * in_img]);
            let mut gw = needs[1].then(|| vec![T::zero(); wd.len()]);
            let gb = needs.get(2).copied().unwrap_or(false).then(|| {
                let mut gb = vec![T::zero(); cout];
                for (i, plane) in g.chunks(p).enumerate() {
                    gb[i % cout] += plane.iter().copied().sum();
                }
                gb
            });
            let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            let mut dcol = vec![T::zero(); if geom.is_pointwise() { 0 } else { k * p }];
            for ni in 0..n {
                let gy = &g[ni * cout * p..(ni + 1) * cout * p];
                if let Some(gw) = gw.as_mut() {
                    let img = &xd[ni * in_img..(ni + 1) * in_img];
                    let cols: &[T] = if geom.is_pointwise() {
                        img
                    } else {
                        geom.im2col(img, &mut col);
                        &col
                    };
                    T::gemm(false, true, cout, k, p, T::one(), gy, cols, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[ni * in_img..(ni + 1) * in_img];
                    if geom.is_pointwise() {
                        T::gemm(true, false, k, p, cout, T::one(), &wd, gy, T::zero(), dst);
                    } else {
                        T::gemm(true, false, k, p, cout, T::one(), &wd, gy, T::zero(), &mut dcol);
                        geom.col2im(&dcol, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(gb);
            }
            grads
        }),
    ))
}

/// Per-channel statistics of a training-mode normalization.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

fn check_affine<T: Float>(x: Shape, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let want = Shape::new(1, x.c, 1, 1);
    if gamma.shape() != want || beta.shape() != want {
        return Err(Error::dim(
            "batch_norm",
            format!(
                "affine shapes {} / {} do not match {} channels of {x}",
                gamma.shape(),
                beta.shape(),
                x.c
            ),
        ));
    }
    Ok(())
}

/// Normalizes each channel by its batch statistics, then applies `gamma`, `beta`.
pub fn batch_norm_train<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::dim(
            "batch_norm",
            format!("training mode needs at least 2 values per channel, input is {s}"),
        ));
    }
    let cnt: T = cast(count as f64);
    let plane = s.plane();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for (i, p) in x.data().chunks(plane).enumerate() {
        mean[i % s.c] += p.iter().copied().sum();
    }
    mean.iter_mut().for_each(|m| *m /= cnt);
    for (i, p) in x.data().chunks(plane).enumerate() {
        let m = mean[i % s.c];
        var[i % s.c] += p.iter().map(|&v| (v - m) * (v - m)).sum();
    }
    let var_unbiased: Vec<T> = var.iter().map(|&v| v / (cnt - T::one())).collect();
    var.iter_mut().for_each(|v| *v /= cnt);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    for (i, (src, (dh, dst))) in x
        .data()
        .chunks(plane)
        .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
        .enumerate()
    {
        let c = i % s.c;
        let (m, is, ga, be) = (mean[c], inv_std[c], gamma.data()[c], beta.data()[c]);
        for ((&v, h), o) in src.iter().zip(dh.iter_mut()).zip(dst.iter_mut()) {
            *h = (v - m) * is;
            *o = ga * *h + be;
        }
    }

    let xhat = Arc::new(xhat);
    let gd = gamma.data_arc();
    let channels = s.c;
    let y = Tensor::from_op(
        "batch_norm",
        s,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for (i, (gp, hp)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                let c = i % channels;
                for (&gv, &hv) in gp.iter().zip(hp) {
                    sum_g[c] += gv;
                    sum_gx[c] += gv * hv;
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![T::zero(); g.len()];
                for (i, ((gp, hp), dp)) in g
                    .chunks(plane)
                    .zip(xhat.chunks(plane))
                    .zip(gx.chunks_mut(plane))
                    .enumerate()
                {
                    let c = i % channels;
                    let scale = gd[c] * inv_std[c] / cnt;
                    for ((&gv, &hv), d) in gp.iter().zip(hp).zip(dp.iter_mut()) {
                        *d = scale * (cnt * gv - sum_g[c] - hv * sum_gx[c]);
                    }
                }
                gx
            });
            vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
        }),
    );
    Ok((
        y,
        BatchStats {
            mean,
            var,
            var_unbiased,
        },
    ))
}

/// Normalizes with fixed statistics.
pub fn batch_norm_eval<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    let plane = s.plane();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = mean.to_vec();
    let mut out = vec![T::zero(); s.numel()];
    for (i, (src, dst)) in x.data().chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
        let c = i % s.c;
        let scale = gamma.data()[c] * inv_std[c];
        let shift = beta.data()[c] - mean[c] * scale;
        for (&v, o) in src.iter().zip(dst.iter_mut()) {
            *o = v * scale + shift;
        }
    }
    let (xd, gd) = (x.data_arc(), gamma.data_arc());
    let channels = s.c;
    Ok(Tensor::from_op(
        "batch_norm_eval",
        s,
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.to_vec();
                for (i, p) in gx.chunks_mut(plane).enumerate() {
                    let c = i % channels;
                    let scale = gd[c] * inv_std[c];
                    p.iter_mut().for_each(|v| *v *= scale);
                }
                gx
            });
            let mut sum_g = vec![T::zero(); channels];
            let mut sum_gx = vec![T::zero(); channels];
            for (i, (gp, xp)) in g.chunks(plane).zip(xd.chunks(plane)).enumerate() {
                let c = i % channels;
                for (&gv, &xv) in gp.iter().zip(xp) {
                    sum_g[c] += gv;
                    sum_gx[c] += gv * (xv - mean[c]) * inv_std[c];
                }
            }
            vec![gx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
        }),
    ))
}

/// Max pooling over `k x k` windows with implicit `-inf` padding. Ties route
/// the gradient to the first maximal element in row-major window order.
pub fn max_pool2d<T: Float>(x: &Tensor<T>, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let oh = window_out("max_pool2d", s.h, k, stride, padding)?;
    let ow = window_out("max_pool2d", s.w, k, stride, padding)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for (pi, p) in x.data().chunks(s.plane()).enumerate() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let idx = iy as usize * s.w + ix as usize;
                        let v = p[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.ok_or_else(|| Error::dim("max_pool2d", "empty pooling window"))?;
                out.push(v);
                arg.push(pi * s.plane() + idx);
            }
        }
    }
    let numel = s.numel();
    Ok(Tensor::from_op(
        "max_pool2d",
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); numel];
            for (&gv, &a) in g.iter().zip(&arg) {
                gx[a] += gv;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Per-channel spatial maximum, `(n, c, h, w) -> (n, c, 1, 1)`. First index
/// wins ties.
pub fn global_max_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::dim("global_max_pool", format!("empty spatial extent {s}")));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * s.c);
    let mut arg = Vec::with_capacity(s.n * s.c);
    for (pi, p) in x.data().chunks(plane).enumerate() {
        let mut bi = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[bi] {
                bi = i;
            }
        }
        out.push(p[bi]);
        arg.push(pi * plane + bi);
    }
    let numel = s.numel();
    Ok(Tensor::from_op(
        "global_max_pool",
        Shape::new(s.n, s.c, 1, 1),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); numel];
            for (&gv, &a) in g.iter().zip(&arg) {
                gx[a] += gv;
            }
            vec![Some(gx)]
        }),
    ))
}

/// Interpolation taps along one axis: `(lo, hi, weight of hi)`.
fn linear_taps<T: Float>(len_in: usize, len_out: usize) -> Vec<(usize, usize, T)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, cast(frac))
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the input.
pub fn bilinear_resize<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::dim(
            "bilinear_resize",
            format!("cannot resize {s} to {out_h}x{out_w}"),
        ));
    }
    if (out_h, out_w) == (s.h, s.w) {
        // Half-pixel mapping is exactly the identity here.
        return Ok(Tensor::from_op(
            "resize_identity",
            s,
            x.to_vec(),
            vec![x.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ));
    }
    let ty = Arc::new(linear_taps::<T>(s.h, out_h));
    let tx = Arc::new(linear_taps::<T>(s.w, out_w));
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for p in x.data().chunks(s.plane()) {
        for &(y0, y1, fy) in ty.iter() {
            let (r0, r1) = (&p[y0 * s.w..(y0 + 1) * s.w], &p[y1 * s.w..(y1 + 1) * s.w]);
            for &(x0, x1, fx) in tx.iter() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    let (h, w) = (s.h, s.w);
    Ok(Tensor::from_op(
        "bilinear_resize",
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for (gp, dp) in g.chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gp[oy * out_w + ox];
                        let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                        dp[y0 * w + x0] += gt * (T::one() - fx);
                        dp[y0 * w + x1] += gt * fx;
                        dp[y1 * w + x0] += gb * (T::one() - fx);
                        dp[y1 * w + x1] += gb * fx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Concatenates along the channel axis, preserving order.
pub fn concat_channels<T: Float>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "no parts"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::dim(
                "concat_channels",
                format!("part {s} does not match {first} in batch or spatial extent"),
            ));
        }
    }
    let chans: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
    let total: usize = chans.iter().sum();
    let plane = first.plane();
    let out_shape = Shape::new(first.n, total, first.h, first.w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for ni in 0..first.n {
        for (p, &c) in parts.iter().zip(&chans) {
            out.extend_from_slice(&p.data()[ni * c * plane..(ni + 1) * c * plane]);
        }
    }
    let n = first.n;
    Ok(Tensor::from_op(
        "concat_channels",
        out_shape,
        out,
        parts.to_vec(),
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&chans)
                .map(|(&need, &c)| need.then(|| Vec::with_capacity(n * c * plane)))
                .collect();
            let mut off = 0;
            for _ in 0..n {
                for (gp, &c) in grads.iter_mut().zip(&chans) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + c * plane]);
                    }
                    off += c * plane;
                }
            }
            grads
        }),
    ))
}

fn adaptive_bins(len: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| ((i * len) / bins, ((i + 1) * len).div_ceil(bins)))
        .collect()
}

/// Average pooling onto a fixed `bins x bins` grid. Bin `i` covers
/// `[floor(i L / b), ceil((i + 1) L / b))`, so every bin is non-empty even
/// when `bins > L`.
pub fn adaptive_avg_pool<T: Float>(x: &Tensor<T>, bins: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if bins == 0 || s.plane() == 0 {
        return Err(Error::dim("adaptive_avg_pool", format!("{bins} bins over {s}")));
    }
    let by = Arc::new(adaptive_bins(s.h, bins));
    let bx = Arc::new(adaptive_bins(s.w, bins));
    let mut out = Vec::with_capacity(s.n * s.c * bins * bins);
    for p in x.data().chunks(s.plane()) {
        for &(y0, y1) in by.iter() {
            for &(x0, x1) in bx.iter() {
                let mut acc = T::zero();
                for y in y0..y1 {
                    acc += p[y * s.w + x0..y * s.w + x1].iter().copied().sum::<T>();
                }
                out.push(acc / cast(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Ok(Tensor::from_op(
        "adaptive_avg_pool",
        Shape::new(s.n, s.c, bins, bins),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); s.numel()];
            for (gp, dp) in g.chunks(bins * bins).zip(gx.chunks_mut(s.plane())) {
                for (i, &(y0, y1)) in by.iter().enumerate() {
                    for (j, &(x0, x1)) in bx.iter().enumerate() {
                        let share = gp[i * bins + j] / cast(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            dp[y * s.w + x0..y * s.w + x1].iter_mut().for_each(|d| *d += share);
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
