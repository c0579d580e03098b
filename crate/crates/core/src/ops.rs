//! Elementwise arithmetic, activations and reductions.

use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Operand {
    Same,
    /// `b` is `(n, c, 1, 1)` and is broadcast over `a`'s spatial extent.
    ChannelBroadcast,
}

fn operand_rule(op: &'static str, a: Shape, b: Shape) -> Result<Operand> {
    if a == b {
        Ok(Operand::Same)
    } else if b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1 {
        Ok(Operand::ChannelBroadcast)
    } else {
        Err(Error::dim(op, format!("cannot combine {a} with {b}")))
    }
}

/// Sums `g` (shaped like `a`) over each spatial plane.
fn reduce_planes<T: Float>(g: &[T], plane: usize) -> Vec<T> {
    g.chunks(plane).map(|p| p.iter().copied().sum()).collect()
}

/// `a + b`; `b` may be `(n, c, 1, 1)`.
pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let rule = operand_rule("add", a.shape(), b.shape())?;
    let shape = a.shape();
    let plane = shape.plane();
    let out: Vec<T> = match rule {
        Operand::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
        Operand::ChannelBroadcast => a
            .data()
            .chunks(plane)
            .zip(b.data())
            .flat_map(|(p, &y)| p.iter().map(move |&x| x + y))
            .collect(),
    };
    Ok(Tensor::from_op(
        "add",
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| g.to_vec());
            let gb = needs[1].then(|| match rule {
                Operand::Same => g.to_vec(),
                Operand::ChannelBroadcast => reduce_planes(g, plane),
            });
            vec![ga, gb]
        }),
    ))
}

/// `a ⊙ b`; `b` may be `(n, c, 1, 1)`, acting as a per-channel gate.
pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let rule = operand_rule("mul", a.shape(), b.shape())?;
    let shape = a.shape();
    let plane = shape.plane();
    let out: Vec<T> = match rule {
        Operand::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
        Operand::ChannelBroadcast => a
            .data()
            .chunks(plane)
            .zip(b.data())
            .flat_map(|(p, &y)| p.iter().map(move |&x| x * y))
            .collect(),
    };
    let (da, db) = (a.data_arc(), b.data_arc());
    Ok(Tensor::from_op(
        "mul",
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| match rule {
                Operand::Same => g.iter().zip(db.iter()).map(|(&g, &y)| g * y).collect(),
                Operand::ChannelBroadcast => g
                    .chunks(plane)
                    .zip(db.iter())
                    .flat_map(|(p, &y)| p.iter().map(move |&g| g * y))
                    .collect(),
            });
            let gb = needs[1].then(|| {
                let prod: Vec<T> = g.iter().zip(da.iter()).map(|(&g, &x)| g * x).collect();
                match rule {
                    Operand::Same => prod,
                    Operand::ChannelBroadcast => reduce_planes(&prod, plane),
                }
            });
            vec![ga, gb]
        }),
    ))
}

/// `a * s + t` for scalars `s` and `t`.
pub fn affine<T: Float>(a: &Tensor<T>, s: T, t: T) -> Tensor<T> {
    let out = a.data().iter().map(|&x| x * s + t).collect();
    Tensor::from_op(
        "affine",
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |g, _| vec![Some(g.iter().map(|&g| g * s).collect())]),
    )
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
    let xs = x.data_arc();
    Tensor::from_op(
        "relu",
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gx = g
                .iter()
                .zip(xs.iter())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(gx)]
        }),
    )
}

/// Logistic function with the exponent clamped to avoid overflow.
pub fn sigmoid_scalar<T: Float>(v: T) -> T {
    let lim = cast::<T>(80.0);
    let v = v.max(-lim).min(lim);
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let s = std::sync::Arc::new(out.clone());
    Tensor::from_op(
        "sigmoid",
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let gx = g
                .iter()
                .zip(s.iter())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            vec![Some(gx)]
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation<T: Float>(op: Activation, x: &Tensor<T>) -> Tensor<T> {
    match op {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Sum of all elements as a `(1, 1, 1, 1)` tensor.
pub fn sum<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let total: T = x.data().iter().copied().sum();
    let n = x.shape().numel();
    Tensor::from_op(
        "sum",
        Shape::scalar(),
        vec![total],
        vec![x.clone()],
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape().numel();
    affine(&sum(x), T::one() / cast(n as f64), T::zero())
}

/// Sum of `x ⊙ w` for a constant weight map, handy for building scalar
/// losses with non-trivial upstream gradients.
pub fn weighted_sum<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(sum(&mul(x, &w.detach())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec())
    }

    #[test]
    fn add_constant_shift() {
        let s = Shape::new(1, 1, 2, 2);
        let out = add(&t(s, &[1.0, 2.0, 3.0, 4.0]), &t(s, &[1.0; 4])).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn ones_gate_is_identity() {
        let a = t(Shape::new(2, 3, 2, 2), &(0..24).map(f64::from).collect::<Vec<_>>());
        let ones = Tensor::full(Shape::new(2, 3, 1, 1), 1.0);
        assert_eq!(mul(&a, &ones).unwrap().data(), a.data());
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        let msg = add(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("(1, 2, 3, 3)") && msg.contains("(1, 3, 1, 1)"), "{msg}");
    }

    #[test]
    fn activation_values() {
        let x = t(Shape::new(1, 1, 1, 3), &[-3.0, 0.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid(&x).data()[1], 0.5);
        let big = t(Shape::new(1, 1, 1, 2), &[1e6, -1e6]);
        let s = sigmoid(&big);
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_sum_grad_at_zero() {
        let x = Tensor::variable(Shape::new(1, 1, 2, 2), vec![0.0f64; 4]);
        sum(&sigmoid(&x)).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}
