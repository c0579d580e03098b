//! Training loss: binary cross entropy plus soft IoU on probability maps.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{cast, Float, Shape, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the logarithms.
pub const CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-8;

fn same_shape<T: Float>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dim(
            op,
            format!("prediction {} vs target {}", x.shape(), y.shape()),
        ));
    }
    Ok(())
}

/// `-(1/n) sum[y ln x + (1 - y) ln(1 - x)]`. The target is treated as a
/// constant.
pub fn bce_loss<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("bce_loss", x, y)?;
    let lo = cast::<T>(CLAMP);
    let hi = T::one() - lo;
    let n = cast::<T>(x.shape().numel() as f64);
    let total: T = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &t)| {
            let p = p.max(lo).min(hi);
            t * p.ln() + (T::one() - t) * (T::one() - p).ln()
        })
        .sum();
    let (xd, yd) = (x.data_arc(), y.data_arc());
    Ok(Tensor::from_op(
        "bce_loss",
        Shape::scalar(),
        vec![-total / n],
        vec![x.clone()],
        Box::new(move |g, _| {
            let scale = g[0] / n;
            let gx = xd
                .iter()
                .zip(yd.iter())
                .map(|(&p, &t)| {
                    if p < lo || p > hi {
                        T::zero()
                    } else {
                        scale * ((T::one() - t) / (T::one() - p) - t / p)
                    }
                })
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// `1 - sum(y x) / (sum(y + x - y x) + eps)`.
pub fn iou_loss<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("iou_loss", x, y)?;
    let eps = cast::<T>(IOU_EPS);
    let (mut inter, mut union) = (T::zero(), T::zero());
    for (&p, &t) in x.data().iter().zip(y.data()) {
        inter += t * p;
        union += t + p - t * p;
    }
    let union = union + eps;
    let yd = y.data_arc();
    Ok(Tensor::from_op(
        "iou_loss",
        Shape::scalar(),
        vec![T::one() - inter / union],
        vec![x.clone()],
        Box::new(move |g, _| {
            let u2 = union * union;
            let gx = yd
                .iter()
                .map(|&t| -g[0] * (t * union - inter * (T::one() - t)) / u2)
                .collect();
            vec![Some(gx)]
        }),
    ))
}

/// `bce + iou`.
pub fn total_loss<T: Float>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    ops::add(&bce_loss(x, y)?, &iou_loss(x, y)?)
}
