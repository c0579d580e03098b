//! Resampling round trips and the interactor ablation matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactors::{InteractorConfig, InteractorKind};
use crate::metrics::Aggregation;
use crate::model::SodModel;
use crate::nn::bilinear_resize;
use crate::tensor::{no_grad, Shape, Tensor};
use crate::trainer::{self, TrainConfig};

/// Both resampling round trips of one planar image at one rate.
#[derive(Clone, Debug)]
pub struct InterpRoundTrip {
    pub rate: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Up-sampled by `rate`, then down-sampled back.
    pub up_down: Vec<f64>,
    /// Down-sampled by `rate`, then up-sampled back.
    pub down_up: Vec<f64>,
    /// `|up_down - source|`.
    pub diff_up_down: Vec<f64>,
    /// `|down_up - source|`.
    pub diff_down_up: Vec<f64>,
    /// L2 norm of `diff_up_down`.
    pub norm_up_down: f64,
    /// L2 norm of `diff_down_up`.
    pub norm_down_up: f64,
}

/// Runs both bilinear round trips on a `(c, h, w)` planar image. Both sides
/// must be divisible by `rate`.
pub fn interp_round_trip(image: &[f64], c: usize, h: usize, w: usize, rate: usize) -> Result<InterpRoundTrip> {
    if rate < 2 {
        return Err(Error::Config(format!("rate must be at least 2, got {rate}")));
    }
    if !h.is_multiple_of(rate) || !w.is_multiple_of(rate) {
        return Err(Error::Config(format!("image {w}x{h} is not divisible by rate {rate}")));
    }
    let x = Tensor::try_new(Shape::new(1, c, h, w), image.to_vec())?;
    let (up_down, down_up) = no_grad(|| -> Result<_> {
        let ud = bilinear_resize(&bilinear_resize(&x, h * rate, w * rate)?, h, w)?;
        let du = bilinear_resize(&bilinear_resize(&x, h / rate, w / rate)?, h, w)?;
        Ok((ud.to_vec(), du.to_vec()))
    })?;
    let diff = |v: &[f64]| -> Vec<f64> { v.iter().zip(image).map(|(a, b)| (a - b).abs()).collect() };
    let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (diff_up_down, diff_down_up) = (diff(&up_down), diff(&down_up));
    Ok(InterpRoundTrip {
        rate,
        channels: c,
        height: h,
        width: w,
        norm_up_down: norm(&diff_up_down),
        norm_down_up: norm(&diff_down_up),
        up_down,
        down_up,
        diff_up_down,
        diff_down_up,
    })
}

/// One configuration of the ablation matrix. The interactor width comes
/// from the base training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `cii` (sharing and depth study) or `interactor` (module study).
    pub table: String,
    pub kind: InteractorKind,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "two")]
    pub depth: usize,
    pub shared: bool,
}

fn three() -> usize {
    3
}

fn two() -> usize {
    2
}

impl AblationRow {
    fn plain(table: &str, kernel: usize, depth: usize, shared: bool) -> Self {
        AblationRow {
            table: table.into(),
            kind: InteractorKind::PlainConv,
            kernel,
            depth,
            shared,
        }
    }

    fn module(kind: InteractorKind) -> Self {
        AblationRow {
            table: "interactor".into(),
            kind,
            kernel: 3,
            depth: 2,
            shared: true,
        }
    }

    pub fn interactor(&self, channels: usize) -> InteractorConfig {
        InteractorConfig {
            kind: self.kind,
            kernel: self.kernel,
            depth: self.depth,
            shared: self.shared,
            channels,
        }
    }

    /// Reads a JSON array of rows.
    pub fn load_all(path: &Path) -> Result<Vec<AblationRow>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<AblationRow> = serde_json::from_str(&text)?;
        if rows.is_empty() {
            return Err(Error::Config(format!("{} lists no rows", path.display())));
        }
        Ok(rows)
    }
}

/// The four sharing/depth rows followed by the five interactor rows.
pub fn default_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::plain("cii", 1, 1, false),
        AblationRow::plain("cii", 3, 2, false),
        AblationRow::plain("cii", 3, 2, true),
        AblationRow::plain("cii", 3, 4, true),
        AblationRow::plain("interactor", 3, 4, true),
        AblationRow::module(InteractorKind::Rgc),
        AblationRow::module(InteractorKind::RgcDagger),
        AblationRow::module(InteractorKind::Ppm),
        AblationRow::module(InteractorKind::PpmDagger),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationResult {
    pub table: String,
    pub config: String,
    pub f_beta: f64,
    pub mae: f64,
    pub s_alpha: f64,
    pub params: u64,
}

/// A directional claim about two rows, checked on this run's numbers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Direction {
    pub claim: String,
    pub holds: bool,
}

/// Trains and evaluates every row with `base` and the row's interactor.
/// Checkpoints go to `work_dir/row{k}.ckpt`.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[AblationRow],
    train_set: &Dataset,
    val_set: &Dataset,
    work_dir: &Path,
    threads: usize,
) -> Result<Vec<AblationResult>> {
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let mut out = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.interactor = row.interactor(base.interactor.channels);
        let label = cfg.interactor.label();
        log::info!("ablation row {}/{}: {} {label}", k + 1, rows.len(), row.table);
        let outcome = trainer::train(&cfg, train_set, None, &work_dir.join(format!("row{}.ckpt", k + 1)))?;
        let model = SodModel::<f32>::load(&outcome.paths.last)?;
        let report = trainer::evaluate(&model, val_set, threads, Aggregation::PerImage)?;
        out.push(AblationResult {
            table: row.table.clone(),
            config: label,
            f_beta: report.f_beta_max,
            mae: report.mae,
            s_alpha: report.s_alpha,
            params: trainer::count_model_params(&model).total,
        });
    }
    Ok(out)
}

/// Shared vs unshared and successor vs own-stage comparisons, for the rows
/// present in `results`.
pub fn directions(results: &[AblationResult]) -> Vec<Direction> {
    let find = |table: &str, config: &str| results.iter().find(|r| r.table == table && r.config == config);
    let pairs = [
        ("cii", "3x3 d2 shared", "3x3 d2 unshared"),
        ("interactor", "RGC+ shared", "RGC shared"),
    ];
    pairs
        .iter()
        .filter_map(|&(table, better, worse)| {
            let (b, w) = (find(table, better)?, find(table, worse)?);
            Some(Direction {
                claim: format!("{better} >= {worse} (max F)"),
                holds: b.f_beta >= w.f_beta,
            })
        })
        .collect()
}

/// `table,config,f_beta,mae,s_alpha,params` rows.
pub fn write_ablation_csv(results: &[AblationResult], path: &Path) -> Result<()> {
    let mut text = String::from("table,config,f_beta,mae,s_alpha,params\n");
    for r in results {
        text.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            r.table, r.config, r.f_beta, r.mae, r.s_alpha, r.params
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
