//! SGD with momentum and coupled weight decay:
//! `v = m*v + g + wd*p; p -= lr*v`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Parameter};

#[derive(Clone, Debug)]
pub struct Sgd<T: Float> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to normalization affine parameters too.
    pub decay_norm: bool,
    velocity: HashMap<usize, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, decay_norm: bool) -> Self {
        Sgd {
            momentum,
            weight_decay,
            decay_norm,
            velocity: HashMap::new(),
        }
    }

    /// One update of every distinct parameter storage in `params`; shared
    /// storages listed more than once are still updated once. `lr` gives the
    /// rate of each parameter's group.
    ///
    /// All gradients are checked before anything is modified, so a
    /// non-finite gradient leaves parameters and momentum untouched.
    pub fn step(&mut self, params: &[Parameter<T>], lr: impl Fn(&Parameter<T>) -> f64) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let unique: Vec<&Parameter<T>> = params.iter().filter(|p| seen.insert(p.storage_id())).collect();
        let grads: Vec<Vec<T>> = unique.iter().map(|p| p.grad()).collect();
        for (p, g) in unique.iter().zip(&grads) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in {} at element {i}",
                    p.name()
                )));
            }
        }
        let m: T = cast(self.momentum);
        for (p, g) in unique.into_iter().zip(grads) {
            let wd: T = if p.is_norm() && !self.decay_norm {
                T::zero()
            } else {
                cast(self.weight_decay)
            };
            let rate: T = cast(lr(p));
            let v = self
                .velocity
                .entry(p.storage_id())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            p.update(|w| {
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(&g) {
                    *vi = m * *vi + *gi + wd * *wi;
                    *wi -= rate * *vi;
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    fn param(v: f64) -> Parameter<f64> {
        Parameter::new("p", &[1], vec![v])
    }

    fn set_grad(p: &Parameter<f64>, g: f64) {
        p.zero_grad();
        let t = p.tensor();
        ops::affine(&ops::sum(&t), g, 0.0).backward().unwrap();
    }

    #[test]
    fn plain_gradient_step() {
        let p = param(1.0);
        set_grad(&p, 2.0);
        Sgd::new(0.0, 0.0, true).step(std::slice::from_ref(&p), |_| 0.1).unwrap();
        assert!((p.values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let p = param(0.0);
        let mut opt = Sgd::new(0.9, 0.0, true);
        for _ in 0..2 {
            set_grad(&p, 1.0);
            opt.step(std::slice::from_ref(&p), |_| 0.1).unwrap();
        }
        assert!((p.values()[0] + 0.1 * (2.0 + 0.9)).abs() < 1e-12);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let p = param(3.0);
        let mut opt = Sgd::new(0.9, 0.1, true);
        for _ in 0..5 {
            p.zero_grad();
            let before = p.values()[0].abs();
            opt.step(std::slice::from_ref(&p), |_| 0.1).unwrap();
            assert!(p.values()[0].abs() < before);
        }
    }

    #[test]
    fn norm_exemption() {
        let p = Parameter::<f64>::new("bn.gamma", &[1], vec![1.0]).as_norm();
        Sgd::new(0.0, 0.5, false).step(std::slice::from_ref(&p), |_| 0.1).unwrap();
        assert_eq!(p.values()[0], 1.0);
    }

    #[test]
    fn shared_updated_once() {
        let p = param(1.0);
        set_grad(&p, 1.0);
        let alias = p.clone();
        Sgd::new(0.0, 0.0, true).step(&[p.clone(), alias], |_| 0.5).unwrap();
        assert!((p.values()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let a = param(1.0);
        let b = Parameter::new("bad", &[1], vec![1.0]);
        set_grad(&a, 1.0);
        set_grad(&b, f64::NAN);
        let err = Sgd::new(0.0, 0.0, true).step(&[a.clone(), b], |_| 0.1).unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        assert_eq!(a.values()[0], 1.0);
    }
}
