//! Centralized information interaction: every pyramid stage is projected to a
//! common width by its own 1x1 conv and then passed through one interactor
//! whose parameters are shared by all stages.
//!
//! Interactor variants:
//! - plain stacks of `depth` conv-BN-ReLU layers,
//! - relative global calibration (RGC): a residual local branch gated
//!   per channel by the sigmoid of the global max of a residual global branch,
//!   then fused by another residual conv pair,
//! - RGC with the global branch fed by the succeeding (coarser) stage,
//! - pyramid pooling (PPM) and its succeeding-stage variant.
//!
//! No interactor resizes its own stage, so `C_i` always has the spatial
//! shape of `B_i`.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::data::netpbm;
use crate::error::{Error, Result};
use crate::nn::{
    adaptive_avg_pool, bilinear_resize, concat_channels, global_max_pool, BnConfig, ConvBnRelu,
    Mode, Module, ModuleItem,
};
use crate::ops;
use crate::tensor::{cast, Float, Parameter, Tensor};

/// Pooling grid sizes of the pyramid pooling branches.
pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InteractorKind {
    PlainConv,
    #[serde(rename = "RGC")]
    Rgc,
    #[serde(rename = "RGCDagger")]
    RgcDagger,
    #[serde(rename = "PPM")]
    Ppm,
    #[serde(rename = "PPMDagger")]
    PpmDagger,
}

impl InteractorKind {
    /// Whether the variant reads the succeeding stage.
    pub fn uses_successor(self) -> bool {
        matches!(self, InteractorKind::RgcDagger | InteractorKind::PpmDagger)
    }

    pub fn label(self) -> &'static str {
        match self {
            InteractorKind::PlainConv => "convs",
            InteractorKind::Rgc => "RGC",
            InteractorKind::RgcDagger => "RGC+",
            InteractorKind::Ppm => "PPM",
            InteractorKind::PpmDagger => "PPM+",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractorConfig {
    pub kind: InteractorKind,
    /// Kernel size of plain conv stacks.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Number of layers of plain conv stacks.
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub shared: bool,
    pub channels: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_depth() -> usize {
    2
}

impl InteractorConfig {
    pub fn plain(kernel: usize, depth: usize, shared: bool, channels: usize) -> Self {
        InteractorConfig {
            kind: InteractorKind::PlainConv,
            kernel,
            depth,
            shared,
            channels,
        }
    }

    pub fn of_kind(kind: InteractorKind, channels: usize) -> Self {
        InteractorConfig {
            kind,
            kernel: 3,
            depth: 2,
            shared: true,
            channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("interactor width must be positive".into()));
        }
        if self.kind == InteractorKind::PlainConv && (self.depth == 0 || self.kernel.is_multiple_of(2)) {
            return Err(Error::Config(format!(
                "plain interactor needs depth >= 1 and an odd kernel, got {}x{} depth {}",
                self.kernel, self.kernel, self.depth
            )));
        }
        Ok(())
    }

    /// Short row label, e.g. `3x3 d2 shared` or `RGC+ shared`.
    pub fn label(&self) -> String {
        let share = if self.shared { "shared" } else { "unshared" };
        match self.kind {
            InteractorKind::PlainConv => {
                format!("{k}x{k} d{} {share}", self.depth, k = self.kernel)
            }
            kind => format!("{} {share}", kind.label()),
        }
    }
}

/// `depth` same-padded conv-BN-ReLU layers.
pub struct PlainConvs<T: Float> {
    pub layers: Vec<ConvBnRelu<T>>,
}

impl<T: Float> PlainConvs<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }
}

fn conv_pair<T: Float, R: Rng + ?Sized>(
    name: &str,
    group: Option<&str>,
    channels: usize,
    bn: BnConfig,
    rng: &mut R,
) -> Vec<ConvBnRelu<T>> {
    (0..2)
        .map(|i| ConvBnRelu::new(&format!("{name}.{i}"), group, channels, channels, 3, 1, bn, rng))
        .collect()
}

fn run<T: Float>(layers: &[ConvBnRelu<T>], x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for l in layers {
        h = l.forward(&h, mode)?;
    }
    Ok(h)
}

/// Intermediate values of one calibration pass.
pub struct RgcOutput<T: Float> {
    pub out: Tensor<T>,
    /// Per-channel gate, `(n, channels, 1, 1)`, in `(0, 1)`.
    pub gate: Tensor<T>,
}

/// Relative global calibration block:
///
/// ```text
/// G   = sigmoid(GMP(R + f_R(R)))
/// L   = B + f_L(B)
/// out = G*L + f_F(G*L)
/// ```
///
/// where each `f` is a pair of 3x3 conv-BN-ReLU layers and `R` is the
/// global-branch input (the stage itself, or its successor).
pub struct RgcBlock<T: Float> {
    pub left: Vec<ConvBnRelu<T>>,
    pub right: Vec<ConvBnRelu<T>>,
    pub fuse: Vec<ConvBnRelu<T>>,
    channels: usize,
}

impl<T: Float> RgcBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: Option<&str>,
        channels: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Self {
        RgcBlock {
            left: conv_pair(&format!("{name}.left"), group, channels, bn, rng),
            right: conv_pair(&format!("{name}.right"), group, channels, bn, rng),
            fuse: conv_pair(&format!("{name}.fuse"), group, channels, bn, rng),
            channels,
        }
    }

    pub fn forward(&self, local: &Tensor<T>, global: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_parts(local, global, mode, None)?.out)
    }

    /// Full pass. `gate_bias` is added before the sigmoid; a very large value
    /// saturates the gate to ones.
    pub fn forward_parts(
        &self,
        local: &Tensor<T>,
        global: &Tensor<T>,
        mode: Mode,
        gate_bias: Option<f64>,
    ) -> Result<RgcOutput<T>> {
        for (what, t) in [("local", local), ("global", global)] {
            if t.shape().c != self.channels {
                return Err(Error::dim(
                    "rgc",
                    format!("{what} input {} is not {} channels wide", t.shape(), self.channels),
                ));
            }
        }
        if global.shape().n != local.shape().n {
            return Err(Error::dim(
                "rgc",
                format!("batch of {} differs from {}", global.shape(), local.shape()),
            ));
        }
        let r = ops::add(global, &run(&self.right, global, mode)?)?;
        let mut pre = global_max_pool(&r)?;
        if let Some(b) = gate_bias {
            pre = ops::affine(&pre, T::one(), cast(b));
        }
        let gate = ops::sigmoid(&pre);
        let l = ops::add(local, &run(&self.left, local, mode)?)?;
        let gl = ops::mul(&l, &gate)?;
        let out = ops::add(&gl, &run(&self.fuse, &gl, mode)?)?;
        Ok(RgcOutput { out, gate })
    }
}

/// Pyramid pooling: average-pool to each of [`PPM_BINS`], 1x1 conv to a
/// quarter width, resize back, concatenate with the input and fuse by a 3x3
/// conv-BN-ReLU.
pub struct PpmBlock<T: Float> {
    pub branches: Vec<ConvBnRelu<T>>,
    pub fuse: ConvBnRelu<T>,
    channels: usize,
}

impl<T: Float> PpmBlock<T> {
    pub fn branch_channels(channels: usize) -> usize {
        (channels / 4).max(1)
    }

    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: Option<&str>,
        channels: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Self {
        let bc = Self::branch_channels(channels);
        let branches = PPM_BINS
            .iter()
            .map(|b| ConvBnRelu::new(&format!("{name}.bin{b}"), group, channels, bc, 1, 1, bn, rng))
            .collect();
        let fuse = ConvBnRelu::new(
            &format!("{name}.fuse"),
            group,
            channels + PPM_BINS.len() * bc,
            channels,
            3,
            1,
            bn,
            rng,
        );
        PpmBlock {
            branches,
            fuse,
            channels,
        }
    }

    /// `pooled_src` feeds the pooling branches: `x` itself, or the
    /// succeeding stage.
    pub fn forward(&self, x: &Tensor<T>, pooled_src: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        for t in [x, pooled_src] {
            if t.shape().c != self.channels {
                return Err(Error::dim(
                    "ppm",
                    format!("input {} is not {} channels wide", t.shape(), self.channels),
                ));
            }
        }
        let s = x.shape();
        let mut parts = vec![x.clone()];
        for (branch, &bins) in self.branches.iter().zip(&PPM_BINS) {
            let pooled = adaptive_avg_pool(pooled_src, bins)?;
            let y = branch.forward(&pooled, mode)?;
            parts.push(bilinear_resize(&y, s.h, s.w)?);
        }
        self.fuse.forward(&concat_channels(&parts)?, mode)
    }
}

/// One interactor body.
pub enum Interactor<T: Float> {
    Plain(PlainConvs<T>),
    Rgc(RgcBlock<T>),
    Ppm(PpmBlock<T>),
}

impl<T: Float> Interactor<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &InteractorConfig,
        name: &str,
        group: Option<&str>,
        bn: BnConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        match cfg.kind {
            InteractorKind::PlainConv => Interactor::Plain(PlainConvs {
                layers: (0..cfg.depth)
                    .map(|i| {
                        ConvBnRelu::new(&format!("{name}.conv{i}"), group, c, c, cfg.kernel, 1, bn, rng)
                    })
                    .collect(),
            }),
            InteractorKind::Rgc | InteractorKind::RgcDagger => {
                Interactor::Rgc(RgcBlock::new(&format!("{name}.rgc"), group, c, bn, rng))
            }
            InteractorKind::Ppm | InteractorKind::PpmDagger => {
                Interactor::Ppm(PpmBlock::new(&format!("{name}.ppm"), group, c, bn, rng))
            }
        }
    }

    /// `global` is the right-branch / pooling input; `x` itself for the
    /// non-successor variants.
    pub fn forward(&self, x: &Tensor<T>, global: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Interactor::Plain(p) => p.forward(x, mode),
            Interactor::Rgc(r) => r.forward(x, global, mode),
            Interactor::Ppm(p) => p.forward(x, global, mode),
        }
    }
}

impl<T: Float> Module<T> for PlainConvs<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.layers.visit(f);
    }
}

impl<T: Float> Module<T> for RgcBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.left.visit(f);
        self.right.visit(f);
        self.fuse.visit(f);
    }
}

impl<T: Float> Module<T> for PpmBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.branches.visit(f);
        self.fuse.visit(f);
    }
}

impl<T: Float> Module<T> for Interactor<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        match self {
            Interactor::Plain(p) => p.visit(f),
            Interactor::Rgc(r) => r.visit(f),
            Interactor::Ppm(p) => p.visit(f),
        }
    }
}

/// Shared-group name of the interactor body when sharing is on.
pub const SHARED_GROUP: &str = "cii.shared";

/// Lateral connections between the encoder and decoder.
pub struct Cii<T: Float> {
    cfg: InteractorConfig,
    in_channels: Vec<usize>,
    pub projections: Vec<ConvBnRelu<T>>,
    /// One body when shared, else one per stage.
    pub bodies: Vec<Interactor<T>>,
}

impl<T: Float> Cii<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &InteractorConfig,
        in_channels: &[usize],
        bn: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if in_channels.is_empty() {
            return Err(Error::Config("at least one pyramid stage is required".into()));
        }
        let projections = in_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                ConvBnRelu::new(&format!("cii.proj{}", i + 1), None, cin, cfg.channels, 1, 1, bn, rng)
            })
            .collect();
        let bodies = if cfg.shared {
            vec![Interactor::new(cfg, SHARED_GROUP, Some(SHARED_GROUP), bn, rng)]
        } else {
            (0..in_channels.len())
                .map(|i| Interactor::new(cfg, &format!("cii.body{}", i + 1), None, bn, rng))
                .collect()
        };
        Ok(Cii {
            cfg: cfg.clone(),
            in_channels: in_channels.to_vec(),
            projections,
            bodies,
        })
    }

    pub fn config(&self) -> &InteractorConfig {
        &self.cfg
    }

    pub fn stages(&self) -> usize {
        self.in_channels.len()
    }

    /// Body used at stage `i` (0-based).
    pub fn body(&self, i: usize) -> &Interactor<T> {
        if self.cfg.shared {
            &self.bodies[0]
        } else {
            &self.bodies[i]
        }
    }

    /// Maps every stage to the common width with its own 1x1 conv-BN-ReLU.
    pub fn project(&self, pyramid: &FeaturePyramid<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        if pyramid.len() != self.stages() {
            return Err(Error::dim(
                "cii",
                format!("{} pyramid stages, expected {}", pyramid.len(), self.stages()),
            ));
        }
        pyramid
            .stages
            .iter()
            .zip(&self.projections)
            .zip(&self.in_channels)
            .enumerate()
            .map(|(i, ((b, proj), &cin))| {
                if b.shape().c != cin {
                    return Err(Error::dim(
                        "cii",
                        format!("stage {} is {}, expected {cin} channels", i + 1, b.shape()),
                    ));
                }
                proj.forward(b, mode)
            })
            .collect()
    }

    /// Runs the interactor over already projected stages.
    pub fn interact(&self, projected: &[Tensor<T>], mode: Mode) -> Result<Vec<Tensor<T>>> {
        let m = projected.len();
        (0..m)
            .map(|i| {
                let x = &projected[i];
                // The coarsest stage has no successor and reads itself.
                let global = if self.cfg.kind.uses_successor() && i + 1 < m {
                    &projected[i + 1]
                } else {
                    x
                };
                self.body(i).forward(x, global, mode)
            })
            .collect()
    }

    /// `C_i = InI(f_i(B_i))` for every stage.
    pub fn forward(&self, pyramid: &FeaturePyramid<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        let projected = self.project(pyramid, mode)?;
        self.interact(&projected, mode)
    }

    pub fn projection_parameters(&self) -> Vec<Parameter<T>> {
        crate::nn::parameters(&self.projections)
    }

    pub fn body_parameters(&self) -> Vec<Parameter<T>> {
        crate::nn::parameters(&self.bodies)
    }
}

impl<T: Float> Module<T> for Cii<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.projections.visit(f);
        self.bodies.visit(f);
    }
}

/// Mean over channels of image `index` of `t`, min-max scaled to 8 bits.
/// A constant map becomes uniform 128.
pub fn feature_image<T: Float>(t: &Tensor<T>, index: usize) -> (usize, usize, Vec<u8>) {
    let s = t.shape();
    let plane = s.plane();
    let mut mean = vec![0.0f64; plane];
    for c in 0..s.c {
        let off = (index * s.c + c) * plane;
        for (m, v) in mean.iter_mut().zip(&t.data()[off..off + plane]) {
            *m += v.to_f64().unwrap_or(0.0);
        }
    }
    mean.iter_mut().for_each(|m| *m /= s.c.max(1) as f64);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = mean
        .iter()
        .map(|&m| {
            if hi > lo {
                ((m - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect();
    (s.h, s.w, pixels)
}

/// Writes `stage{i}_{tag}.pgm` (1-based `i`) for the first image of each
/// tensor.
pub fn dump_features<T: Float>(stages: &[Tensor<T>], dir: &Path, tag: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    stages
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (h, w, px) = feature_image(t, 0);
            let path = dir.join(format!("stage{}_{tag}.pgm", i + 1));
            netpbm::write_pgm(&path, w, h, &px)?;
            Ok(path)
        })
        .collect()
}
