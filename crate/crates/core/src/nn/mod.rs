//! Layers used by the saliency network.

pub mod functional;
mod layers;

pub use functional::{
    adaptive_avg_pool, batch_norm_eval, batch_norm_train, bilinear_resize, concat_channels, conv2d,
    global_max_pool, max_pool2d,
};
pub use layers::{BatchNorm2d, BnConfig, Conv2d, ConvBnRelu, Mode, Module, ModuleItem};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{cast, Float, Parameter};

/// Collects the distinct parameters of a module, first occurrence order.
pub fn parameters<T: Float>(m: &dyn Module<T>) -> Vec<Parameter<T>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    m.visit(&mut |item| {
        if let ModuleItem::Param(p) = item {
            if seen.insert(p.storage_id()) {
                out.push(p.clone());
            }
        }
    });
    out
}

pub fn buffers<T: Float>(m: &dyn Module<T>) -> Vec<crate::tensor::Buffer<T>> {
    let mut out = Vec::new();
    m.visit(&mut |item| {
        if let ModuleItem::Buffer(b) = item {
            out.push(b.clone());
        }
    });
    out
}

/// Number of distinct learnable scalars.
pub fn param_count<T: Float>(m: &dyn Module<T>) -> usize {
    parameters(m).iter().map(Parameter::numel).sum()
}

pub fn zero_grad<T: Float>(m: &dyn Module<T>) {
    for p in parameters(m) {
        p.zero_grad();
    }
}

/// Kaiming-normal values for a weight with the given fan-in.
pub(crate) fn kaiming<T: Float, R: Rng + ?Sized>(rng: &mut R, count: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..count).map(|_| cast(normal.sample(rng))).collect()
}
