use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::functional as F;
use super::kaiming;
use crate::error::Result;
use crate::ops;
use crate::tensor::{cast, Buffer, Float, Parameter, Tensor};

/// Normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Running estimates.
    Eval,
}

pub enum ModuleItem<'a, T: Float> {
    Param(&'a Parameter<T>),
    Buffer(&'a Buffer<T>),
}

/// Anything holding parameters or buffers.
pub trait Module<T: Float> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>));
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

pub struct Conv2d<T: Float> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> Conv2d<T> {
    /// Square kernel, Kaiming fan-in initialization, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: Option<&str>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = Parameter::new(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            kaiming(rng, cout * fan_in, fan_in),
        )
        .in_group(group);
        let bias = bias.then(|| {
            Parameter::new(format!("{name}.bias"), &[cout], vec![T::zero(); cout]).in_group(group)
        });
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(Parameter::tensor);
        F::conv2d(x, &self.weight.tensor(), b.as_ref(), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        f(ModuleItem::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(ModuleItem::Param(b));
        }
    }
}

pub struct BatchNorm2d<T: Float> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    /// Number of training batches folded into the running estimates.
    pub tracked: Buffer<T>,
    pub cfg: BnConfig,
    warned: AtomicBool,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(name: &str, group: Option<&str>, channels: usize, cfg: BnConfig) -> Self {
        let affine = |suffix: &str, v: T| {
            Parameter::new(format!("{name}.{suffix}"), &[channels], vec![v; channels])
                .in_group(group)
                .as_norm()
        };
        BatchNorm2d {
            gamma: affine("gamma", T::one()),
            beta: affine("beta", T::zero()),
            running_mean: Buffer::new(format!("{name}.running_mean"), vec![T::zero(); channels]),
            running_var: Buffer::new(format!("{name}.running_var"), vec![T::one(); channels]),
            tracked: Buffer::new(format!("{name}.tracked"), vec![T::zero()]),
            cfg,
            warned: AtomicBool::new(false),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let eps = cast::<T>(self.cfg.eps);
        match mode {
            Mode::Train => {
                let (y, stats) =
                    F::batch_norm_train(x, &self.gamma.tensor(), &self.beta.tensor(), eps)?;
                let m = cast::<T>(self.cfg.momentum);
                let keep = T::one() - m;
                self.running_mean.update(|rm| {
                    rm.iter_mut().zip(&stats.mean).for_each(|(r, &b)| *r = keep * *r + m * b)
                });
                self.running_var.update(|rv| {
                    rv.iter_mut()
                        .zip(&stats.var_unbiased)
                        .for_each(|(r, &b)| *r = keep * *r + m * b)
                });
                self.tracked.update(|t| t[0] += T::one());
                Ok(y)
            }
            Mode::Eval => {
                if self.tracked.get()[0] == T::zero() && !self.warned.swap(true, Ordering::Relaxed) {
                    log::warn!(
                        "{}: evaluating before any statistics were collected, using mean 0 / var 1",
                        self.running_mean.name()
                    );
                }
                F::batch_norm_eval(
                    x,
                    &self.gamma.tensor(),
                    &self.beta.tensor(),
                    &self.running_mean.get(),
                    &self.running_var.get(),
                    eps,
                )
            }
        }
    }

    /// True once an eval-mode pass ran without collected statistics.
    pub fn warned_uninitialized(&self) -> bool {
        self.warned.load(Ordering::Relaxed)
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        f(ModuleItem::Param(&self.gamma));
        f(ModuleItem::Param(&self.beta));
        f(ModuleItem::Buffer(&self.running_mean));
        f(ModuleItem::Buffer(&self.running_var));
        f(ModuleItem::Buffer(&self.tracked));
    }
}

/// Convolution, batch normalization and an optional ReLU.
pub struct ConvBnRelu<T: Float> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub relu: bool,
}

impl<T: Float> ConvBnRelu<T> {
    /// Bias-free conv with "same" padding for odd kernels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: Option<&str>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                group,
                cin,
                cout,
                kernel,
                stride,
                kernel / 2,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(&format!("{name}.bn"), group, cout, bn),
            relu: true,
        }
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv.forward(x)?, mode)?;
        Ok(if self.relu { ops::relu(&y) } else { y })
    }
}

impl<T: Float> Module<T> for ConvBnRelu<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
}

impl<T: Float, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        for m in self {
            m.visit(f);
        }
    }
}

impl<T: Float, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }
}
