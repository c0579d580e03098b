//! Bottom-up pathway: a ResNet-style encoder producing the five-stage
//! feature pyramid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool2d, BnConfig, ConvBnRelu, Mode, Module, ModuleItem};
use crate::ops;
use crate::tensor::{Float, Tensor};

pub const STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convolutions (ResNet-18/34).
    Basic,
    /// 1x1-3x3-1x1 with 4x expansion (ResNet-50). Only used for analytic
    /// accounting.
    Bottleneck,
}

/// Where the first pyramid stage is tapped relative to the stem max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemTap {
    /// Stem conv output, stride 2.
    #[default]
    BeforePool,
    /// Stem max-pool output, stride 4.
    AfterPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub input_size: (usize, usize),
    #[serde(default = "basic")]
    pub block: BlockKind,
    #[serde(default)]
    pub stem_tap: StemTap,
}

fn basic() -> BlockKind {
    BlockKind::Basic
}

impl BackboneConfig {
    pub fn resnet18(size: usize) -> Self {
        BackboneConfig {
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            input_size: (size, size),
            block: BlockKind::Basic,
            stem_tap: StemTap::BeforePool,
        }
    }

    pub fn tiny(size: usize) -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            input_size: (size, size),
            block: BlockKind::Basic,
            stem_tap: StemTap::BeforePool,
        }
    }

    pub fn resnet50(size: usize) -> Self {
        BackboneConfig {
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [3, 4, 6, 3],
            input_size: (size, size),
            block: BlockKind::Bottleneck,
            stem_tap: StemTap::BeforePool,
        }
    }

    pub fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    /// Channels of `B_1..B_5`.
    pub fn pyramid_channels(&self) -> [usize; STAGES] {
        let e = self.expansion();
        let s = self.stage_channels;
        [self.stem_channels, s[0] * e, s[1] * e, s[2] * e, s[3] * e]
    }

    pub fn strides(&self) -> [usize; STAGES] {
        match self.stem_tap {
            StemTap::BeforePool => [2, 4, 8, 16, 32],
            StemTap::AfterPool => [4, 4, 8, 16, 32],
        }
    }

    /// Spatial `(h, w)` of every stage for the configured input.
    pub fn stage_sizes(&self) -> [(usize, usize); STAGES] {
        let (h, w) = self.input_size;
        self.strides().map(|s| (h / s, w / s))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of 32"
            )));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }
}

/// Stage outputs `B_1..B_M`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Float> {
    pub stages: Vec<Tensor<T>>,
    pub strides: Vec<usize>,
}

impl<T: Float> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

pub struct BasicBlock<T: Float> {
    conv1: ConvBnRelu<T>,
    conv2: ConvBnRelu<T>,
    downsample: Option<ConvBnRelu<T>>,
}

impl<T: Float> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Self {
        let conv1 = ConvBnRelu::new(&format!("{name}.conv1"), None, cin, cout, 3, stride, bn, rng);
        let conv2 =
            ConvBnRelu::new(&format!("{name}.conv2"), None, cout, cout, 3, 1, bn, rng).without_relu();
        let downsample = (stride != 1 || cin != cout).then(|| {
            ConvBnRelu::new(&format!("{name}.downsample"), None, cin, cout, 1, stride, bn, rng)
                .without_relu()
        });
        BasicBlock {
            conv1,
            conv2,
            downsample,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv2.forward(&self.conv1.forward(x, mode)?, mode)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&y, &skip)?))
    }
}

impl<T: Float> Module<T> for BasicBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.downsample.visit(f);
    }
}

pub struct Backbone<T: Float> {
    cfg: BackboneConfig,
    stem: ConvBnRelu<T>,
    stages: Vec<Vec<BasicBlock<T>>>,
}

impl<T: Float> Backbone<T> {
    /// Builds the encoder with Kaiming fan-in initialization drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, bn: BnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if cfg.block != BlockKind::Basic {
            return Err(Error::Config(
                "bottleneck backbones are available for parameter/FLOP accounting only".into(),
            ));
        }
        let stem = ConvBnRelu::new("backbone.stem", None, 3, cfg.stem_channels, 7, 2, bn, rng);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (s, (&cout, &blocks)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.blocks_per_stage)
            .enumerate()
        {
            let stage = (0..blocks)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let block_in = if b == 0 { cin } else { cout };
                    let name = format!("backbone.layer{}.{b}", s + 1);
                    BasicBlock::new(&name, block_in, cout, stride, bn, rng)
                })
                .collect();
            stages.push(stage);
            cin = cout;
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<FeaturePyramid<T>> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::dim(
                "backbone",
                format!("expected 3 input channels, got {s}"),
            ));
        }
        if (s.h, s.w) != self.cfg.input_size {
            return Err(Error::dim(
                "backbone",
                format!(
                    "input {s} does not match configured size {:?}",
                    self.cfg.input_size
                ),
            ));
        }
        let stem = self.stem.forward(x, mode)?;
        let pooled = max_pool2d(&stem, 3, 2, 1)?;
        let mut stages = Vec::with_capacity(STAGES);
        stages.push(match self.cfg.stem_tap {
            StemTap::BeforePool => stem,
            StemTap::AfterPool => pooled.clone(),
        });
        let mut h = pooled;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
            stages.push(h.clone());
        }
        Ok(FeaturePyramid {
            stages,
            strides: self.cfg.strides().to_vec(),
        })
    }
}

impl<T: Float> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.stem.visit(f);
        for stage in &self.stages {
            stage.visit(f);
        }
    }
}
