//! Top-down pathway: coarse-to-fine aggregation into one saliency map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, concat_channels, BnConfig, Conv2d, ConvBnRelu, Mode, Module, ModuleItem};
use crate::ops;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    /// `C_i + up(D_{i+1})`.
    #[default]
    Add,
    /// Channel concatenation of `C_i` and `up(D_{i+1})`.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecoderConfig {
    #[serde(default)]
    pub merge: Merge,
}

pub struct Decoder<T: Float> {
    merge: Merge,
    channels: usize,
    /// `smooth[i]` produces `D_{i+1}` (0-based level `i`).
    pub smooth: Vec<ConvBnRelu<T>>,
    pub head: Conv2d<T>,
}

impl<T: Float> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &DecoderConfig,
        stages: usize,
        channels: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Self {
        let cin = match cfg.merge {
            Merge::Add => channels,
            Merge::Concat => 2 * channels,
        };
        let smooth = (0..stages.saturating_sub(1))
            .map(|i| {
                ConvBnRelu::new(&format!("decoder.smooth{}", i + 1), None, cin, channels, 3, 1, bn, rng)
            })
            .collect();
        let head = Conv2d::new("decoder.head", None, channels, 1, 1, 1, 0, true, rng);
        Decoder {
            merge: cfg.merge,
            channels,
            smooth,
            head,
        }
    }

    /// Aggregated finest-level features `D_1`.
    pub fn aggregate(&self, c: &[Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        if c.len() != self.smooth.len() + 1 {
            return Err(Error::dim(
                "decoder",
                format!("{} lateral inputs, expected {}", c.len(), self.smooth.len() + 1),
            ));
        }
        for (i, t) in c.iter().enumerate() {
            if t.shape().c != self.channels {
                return Err(Error::dim(
                    "decoder",
                    format!("lateral {} is {}, expected {} channels", i + 1, t.shape(), self.channels),
                ));
            }
            if let Some(next) = c.get(i + 1) {
                let (a, b) = (t.shape(), next.shape());
                if b.h > a.h || b.w > a.w || b.n != a.n {
                    return Err(Error::dim(
                        "decoder",
                        format!("lateral {} {b} is finer than lateral {} {a}", i + 2, i + 1),
                    ));
                }
            }
        }
        let mut d = c[c.len() - 1].clone();
        for i in (0..c.len() - 1).rev() {
            let lateral = &c[i];
            let up = bilinear_resize(&d, lateral.shape().h, lateral.shape().w)?;
            let merged = match self.merge {
                Merge::Add => ops::add(lateral, &up)?,
                Merge::Concat => concat_channels(&[lateral.clone(), up])?,
            };
            d = self.smooth[i].forward(&merged, mode)?;
        }
        Ok(d)
    }

    /// Saliency probabilities `(n, 1, out_h, out_w)`.
    pub fn forward(&self, c: &[Tensor<T>], out_h: usize, out_w: usize, mode: Mode) -> Result<Tensor<T>> {
        let d1 = self.aggregate(c, mode)?;
        let logits = self.head.forward(&d1)?;
        Ok(ops::sigmoid(&bilinear_resize(&logits, out_h, out_w)?))
    }
}

impl<T: Float> Module<T> for Decoder<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.smooth.visit(f);
        self.head.visit(f);
    }
}
