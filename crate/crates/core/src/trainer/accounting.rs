//! Analytic parameter and multiply-accumulate accounting.
//!
//! [`describe`] walks a [`ModelConfig`] layer by layer exactly as the model
//! constructors do, without allocating any weights, so it also covers
//! bottleneck encoders that have no runnable forward pass here.
//!
//! Cost conventions (per image, in multiply-accumulates):
//! - convolution: `k*k*cin*cout*oh*ow`; the bias is not counted,
//! - batch norm: one per element (folded scale and shift),
//! - bilinear resize: four per output element,
//! - pooling: one per input element read,
//! - residual adds and gate products: one per element,
//! - ReLU and sigmoid: free.
//!
//! FLOPs are reported as `2 * MAC`.

use serde::Serialize;

use crate::backbone::{BackboneConfig, BlockKind, StemTap, STAGES};
use crate::decoder::Merge;
use crate::error::Result;
use crate::interactors::{InteractorConfig, InteractorKind, PpmBlock, PPM_BINS};
use crate::model::ModelConfig;
use crate::nn::{Module, ModuleItem};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Backbone,
    Projections,
    Interactor,
    Decoder,
    Head,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Backbone,
        Component::Projections,
        Component::Interactor,
        Component::Decoder,
        Component::Head,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::Projections => "projections",
            Component::Interactor => "interactor",
            Component::Decoder => "decoder",
            Component::Head => "head",
        }
    }

    /// Component owning a parameter, from its hierarchical name.
    pub fn of_name(name: &str) -> Option<Component> {
        if name.starts_with("backbone.") {
            Some(Component::Backbone)
        } else if name.starts_with("cii.proj") {
            Some(Component::Projections)
        } else if name.starts_with("cii.") {
            Some(Component::Interactor)
        } else if name.starts_with("decoder.head") {
            Some(Component::Head)
        } else if name.starts_with("decoder.") {
            Some(Component::Decoder)
        } else {
            None
        }
    }
}

/// Cost of one layer application.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub component: Component,
    pub name: String,
    /// Learnable scalars owned by this layer; zero when the layer reuses
    /// storage already counted (shared interactor at later stages).
    pub params: u64,
    pub macs: u64,
}

/// Per-component totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub backbone: u64,
    pub projections: u64,
    pub interactor: u64,
    pub decoder: u64,
    pub head: u64,
    pub total: u64,
}

impl Breakdown {
    fn add(&mut self, c: Component, v: u64) {
        *match c {
            Component::Backbone => &mut self.backbone,
            Component::Projections => &mut self.projections,
            Component::Interactor => &mut self.interactor,
            Component::Decoder => &mut self.decoder,
            Component::Head => &mut self.head,
        } += v;
        self.total += v;
    }

    pub fn get(&self, c: Component) -> u64 {
        match c {
            Component::Backbone => self.backbone,
            Component::Projections => self.projections,
            Component::Interactor => self.interactor,
            Component::Decoder => self.decoder,
            Component::Head => self.head,
        }
    }

    pub fn scaled(&self, k: u64) -> Breakdown {
        Breakdown {
            backbone: self.backbone * k,
            projections: self.projections * k,
            interactor: self.interactor * k,
            decoder: self.decoder * k,
            head: self.head * k,
            total: self.total * k,
        }
    }
}

/// Convolution output side length (floor rule).
pub fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// MACs of one convolution application.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, oh: usize, ow: usize) -> u64 {
    (kernel * kernel * cin * cout * oh * ow) as u64
}

struct Walker {
    layers: Vec<LayerCost>,
    component: Component,
    /// When false, parameters are not attributed (reused shared storage).
    own_params: bool,
}

impl Walker {
    fn push(&mut self, name: String, params: usize, macs: u64) {
        self.layers.push(LayerCost {
            component: self.component,
            name,
            params: if self.own_params { params as u64 } else { 0 },
            macs,
        });
    }

    /// Conv without bias followed by batch norm (and a free ReLU).
    /// Returns the output size.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        (h, w): (usize, usize),
    ) -> (usize, usize) {
        let pad = kernel / 2;
        let (oh, ow) = (conv_out(h, kernel, stride, pad), conv_out(w, kernel, stride, pad));
        self.push(
            format!("{name}.conv"),
            kernel * kernel * cin * cout,
            conv_macs(cin, cout, kernel, oh, ow),
        );
        self.push(format!("{name}.bn"), 2 * cout, (cout * oh * ow) as u64);
        (oh, ow)
    }

    fn elementwise(&mut self, name: String, c: usize, (h, w): (usize, usize)) {
        self.push(name, 0, (c * h * w) as u64);
    }

    fn resize(&mut self, name: String, c: usize, (oh, ow): (usize, usize)) {
        self.push(name, 0, (4 * c * oh * ow) as u64);
    }
}

fn backbone(wk: &mut Walker, cfg: &BackboneConfig) -> [(usize, usize); STAGES] {
    wk.component = Component::Backbone;
    let mut sizes = [(0, 0); STAGES];
    let stem = wk.conv_bn("backbone.stem", 3, cfg.stem_channels, 7, 2, cfg.input_size);
    let pooled = (conv_out(stem.0, 3, 2, 1), conv_out(stem.1, 3, 2, 1));
    wk.push("backbone.maxpool".into(), 0, (cfg.stem_channels * stem.0 * stem.1) as u64);
    sizes[0] = match cfg.stem_tap {
        StemTap::BeforePool => stem,
        StemTap::AfterPool => pooled,
    };
    let e = cfg.expansion();
    let mut cin = cfg.stem_channels;
    let mut size = pooled;
    for s in 0..4 {
        let width = cfg.stage_channels[s];
        let cout = width * e;
        for b in 0..cfg.blocks_per_stage[s] {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let block_in = if b == 0 { cin } else { cout };
            let name = format!("backbone.layer{}.{b}", s + 1);
            let out = match cfg.block {
                BlockKind::Basic => {
                    let o = wk.conv_bn(&format!("{name}.conv1"), block_in, cout, 3, stride, size);
                    wk.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1, o)
                }
                BlockKind::Bottleneck => {
                    let o = wk.conv_bn(&format!("{name}.conv1"), block_in, width, 1, 1, size);
                    let o = wk.conv_bn(&format!("{name}.conv2"), width, width, 3, stride, o);
                    wk.conv_bn(&format!("{name}.conv3"), width, cout, 1, 1, o)
                }
            };
            if stride != 1 || block_in != cout {
                wk.conv_bn(&format!("{name}.downsample"), block_in, cout, 1, stride, size);
            }
            wk.elementwise(format!("{name}.add"), cout, out);
            size = out;
        }
        sizes[s + 1] = size;
        cin = cout;
    }
    sizes
}

/// One interactor application on a stage of size `x` whose global/pooling
/// input has size `g`.
fn interactor(wk: &mut Walker, cfg: &InteractorConfig, name: &str, x: (usize, usize), g: (usize, usize)) {
    let c = cfg.channels;
    match cfg.kind {
        InteractorKind::PlainConv => {
            for i in 0..cfg.depth {
                wk.conv_bn(&format!("{name}.conv{i}"), c, c, cfg.kernel, 1, x);
            }
        }
        InteractorKind::Rgc | InteractorKind::RgcDagger => {
            for branch in ["left", "right", "fuse"] {
                let at = if branch == "right" { g } else { x };
                for i in 0..2 {
                    wk.conv_bn(&format!("{name}.rgc.{branch}.{i}"), c, c, 3, 1, at);
                }
                wk.elementwise(format!("{name}.rgc.{branch}.residual"), c, at);
            }
            wk.push(format!("{name}.rgc.gmp"), 0, (c * g.0 * g.1) as u64);
            wk.elementwise(format!("{name}.rgc.gate"), c, x);
        }
        InteractorKind::Ppm | InteractorKind::PpmDagger => {
            let bc = PpmBlock::<f32>::branch_channels(c);
            for &b in &PPM_BINS {
                wk.push(format!("{name}.ppm.pool{b}"), 0, (c * g.0 * g.1) as u64);
                wk.conv_bn(&format!("{name}.ppm.bin{b}"), c, bc, 1, 1, (b, b));
                wk.resize(format!("{name}.ppm.resize{b}"), bc, x);
            }
            wk.conv_bn(&format!("{name}.ppm.fuse"), c + PPM_BINS.len() * bc, c, 3, 1, x);
        }
    }
}

/// Every layer application of the model for one image of the configured
/// input size.
pub fn describe(cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
    cfg.backbone.validate()?;
    cfg.interactor.validate()?;
    let mut wk = Walker {
        layers: Vec::new(),
        component: Component::Backbone,
        own_params: true,
    };
    let sizes = backbone(&mut wk, &cfg.backbone);
    let chans = cfg.backbone.pyramid_channels();
    let ic = &cfg.interactor;
    let c = ic.channels;

    wk.component = Component::Projections;
    for (i, (&cin, &size)) in chans.iter().zip(&sizes).enumerate() {
        wk.conv_bn(&format!("cii.proj{}", i + 1), cin, c, 1, 1, size);
    }

    wk.component = Component::Interactor;
    for i in 0..STAGES {
        let global = if ic.kind.uses_successor() && i + 1 < STAGES {
            sizes[i + 1]
        } else {
            sizes[i]
        };
        let name = if ic.shared {
            crate::interactors::SHARED_GROUP.to_string()
        } else {
            format!("cii.body{}", i + 1)
        };
        wk.own_params = !ic.shared || i == 0;
        interactor(&mut wk, ic, &name, sizes[i], global);
    }
    wk.own_params = true;

    wk.component = Component::Decoder;
    let smooth_in = match cfg.decoder.merge {
        Merge::Add => c,
        Merge::Concat => 2 * c,
    };
    for i in (0..STAGES - 1).rev() {
        wk.resize(format!("decoder.up{}", i + 1), c, sizes[i]);
        if cfg.decoder.merge == Merge::Add {
            wk.elementwise(format!("decoder.merge{}", i + 1), c, sizes[i]);
        }
        wk.conv_bn(&format!("decoder.smooth{}", i + 1), smooth_in, c, 3, 1, sizes[i]);
    }

    wk.component = Component::Head;
    let (h1, w1) = sizes[0];
    wk.push("decoder.head".into(), c + 1, conv_macs(c, 1, 1, h1, w1));
    wk.resize("decoder.head.resize".into(), 1, cfg.backbone.input_size);
    Ok(wk.layers)
}

/// Analytic parameter count per component, shared storage counted once.
pub fn count_params(cfg: &ModelConfig) -> Result<Breakdown> {
    let mut b = Breakdown::default();
    for l in describe(cfg)? {
        b.add(l.component, l.params);
    }
    Ok(b)
}

/// Parameter count of a built model, by parameter-name prefix.
pub fn count_model_params<T: Float>(model: &dyn Module<T>) -> Breakdown {
    let mut b = Breakdown::default();
    let mut seen = std::collections::HashSet::new();
    model.visit(&mut |item| {
        if let ModuleItem::Param(p) = item {
            if seen.insert(p.storage_id()) {
                let c = Component::of_name(p.name()).unwrap_or(Component::Head);
                b.add(c, p.numel() as u64);
            }
        }
    });
    b
}

/// Parameters of one interactor body at the given configuration.
pub fn interactor_body_params(cfg: &InteractorConfig) -> u64 {
    let mut wk = Walker {
        layers: Vec::new(),
        component: Component::Interactor,
        own_params: true,
    };
    interactor(&mut wk, cfg, "body", (8, 8), (8, 8));
    wk.layers.iter().map(|l| l.params).sum()
}

/// Analytic cost of one image at `cfg`'s input size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub input_size: (usize, usize),
    pub macs: Breakdown,
    /// `2 * macs`.
    pub flops: Breakdown,
}

pub fn estimate_flops(cfg: &ModelConfig) -> Result<FlopsReport> {
    let mut macs = Breakdown::default();
    for l in describe(cfg)? {
        macs.add(l.component, l.macs);
    }
    Ok(FlopsReport {
        input_size: cfg.backbone.input_size,
        macs,
        flops: macs.scaled(2),
    })
}
