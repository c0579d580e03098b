//! Subcommand implementations.

use std::path::Path;

use ciisod::backbone::BackboneConfig;
use ciisod::data::{self, netpbm, Dataset};
use ciisod::experiments::{self, AblationRow};
use ciisod::gradcheck::{self, GradcheckConfig};
use ciisod::interactors;
use ciisod::metrics::Aggregation;
use ciisod::nn::Mode;
use ciisod::trainer::{self, accounting::Component, Breakdown, TrainConfig};
use ciisod::{no_grad, ModelConfig, Shape, SodModel, Tensor};
use thiserror::Error;

use crate::{Preset, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ciisod::Error),
    #[error("{0}")]
    Usage(String),
    /// A check ran to completion and reported failure.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    /// 1 usage, 2 data or format, 3 numerical.
    pub fn exit_code(&self) -> u8 {
        use ciisod::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::CheckFailed(_) | CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

fn preset_config(p: Preset) -> TrainConfig {
    match p {
        Preset::Paper => TrainConfig::paper(),
        Preset::Desk => TrainConfig::desk(),
    }
}

fn train_config(config: Option<&Path>, preset: Option<Preset>) -> Result<TrainConfig> {
    match (config, preset) {
        (Some(path), _) => Ok(TrainConfig::load(path)?),
        (None, Some(p)) => Ok(preset_config(p)),
        (None, None) => Err(CliError::Usage("pass --config or --preset".into())),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result {
    let text = serde_json::to_string_pretty(value).map_err(ciisod::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| ciisod::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result {
    std::fs::create_dir_all(dir).map_err(|e| ciisod::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Loads `data` and the validation set: `val` when given, otherwise the last
/// `holdout` fraction of `data` (none when the fraction is zero).
fn split_data(data: &Path, val: Option<&Path>, holdout: f64) -> Result<(Dataset, Option<Dataset>)> {
    let mut train = Dataset::load(data)?;
    if let Some(v) = val {
        return Ok((train, Some(Dataset::load(v)?)));
    }
    if !(0.0..1.0).contains(&holdout) {
        return Err(CliError::Usage(format!("--holdout must be in [0, 1), got {holdout}")));
    }
    let count = (train.len() as f64 * holdout).round() as usize;
    if count == 0 {
        return Ok((train, None));
    }
    if count >= train.len() {
        return Err(CliError::Usage(format!(
            "holding out {count} of {} samples leaves nothing to train on",
            train.len()
        )));
    }
    let held = train.split_off(count);
    Ok((train, Some(held)))
}

pub fn gen_data(out: &Path, count: usize, size: usize, seed: u64) -> Result {
    let manifest = data::gen_synthetic(count, size, seed, out)?;
    println!("wrote {count} samples ({size}x{size}), manifest {}", manifest.display());
    Ok(())
}

pub fn init_config(preset: Preset, out: &Path) -> Result {
    write_json(&preset_config(preset), out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    val: Option<&Path>,
    holdout: f64,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    let (train_set, val_set) = split_data(data, val, holdout)?;
    log::info!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.as_ref().map_or(0, Dataset::len)
    );
    let outcome = trainer::train(&cfg, &train_set, val_set.as_ref(), out)?;
    println!(
        "initial loss {:.4}, final loss {:.4} ({:.3}x)",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.final_loss / outcome.initial_loss
    );
    if let Some(v) = outcome.epochs.last().and_then(|e| e.val.as_ref()) {
        println!("last epoch val: max F {:.4}, MAE {:.4}, S {:.4}", v.f_beta_max, v.mae, v.s_alpha);
    }
    if let Some(b) = outcome.best_epoch {
        println!("best epoch {b} -> {}", outcome.paths.best.display());
    }
    println!("weights {}, log {}", outcome.paths.last.display(), outcome.paths.log.display());
    Ok(())
}

pub fn eval(
    ckpt: Option<&Path>,
    preds: Option<&Path>,
    data: &Path,
    report: Option<&Path>,
    pr: Option<&Path>,
    threads: usize,
    pooled: bool,
) -> Result {
    let ds = Dataset::load(data)?;
    let agg = if pooled {
        Aggregation::Pooled
    } else {
        Aggregation::PerImage
    };
    let r = match (ckpt, preds) {
        (Some(c), _) => {
            let model = SodModel::<f32>::load(c)?;
            trainer::evaluate(&model, &ds, threads, agg)?
        }
        (None, Some(dir)) => trainer::evaluate_with(&ds, threads, agg, |s| {
            let path = dir.join(format!("{}.pgm", s.id));
            let (w, h, map) = netpbm::read_map(&path)?;
            if (w, h) != (s.width, s.height) {
                return Err(ciisod::Error::Dimension {
                    op: "eval",
                    detail: format!("{} is {w}x{h}, mask is {}x{}", path.display(), s.width, s.height),
                });
            }
            Ok(map)
        })?,
        (None, None) => return Err(CliError::Usage("pass --ckpt or --preds".into())),
    };
    println!(
        "images {} (degenerate {}), max F {:.4}, mean F {:.4}, S {:.4}, MAE {:.4}",
        r.images, r.degenerate, r.f_beta_max, r.f_beta_mean, r.s_alpha, r.mae
    );
    if let Some(p) = report {
        r.write_json(p)?;
    }
    if let Some(p) = pr {
        r.write_pr_csv(p)?;
    }
    Ok(())
}

pub fn predict(ckpt: &Path, image: &Path, out: &Path) -> Result {
    let model = SodModel::<f32>::load(ckpt)?;
    let img = netpbm::read_rgb(image)?;
    let map = trainer::predict(&model, &img.data, img.height, img.width)?;
    netpbm::write_map(out, img.width, img.height, &map)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub struct AblateArgs<'a> {
    pub data: &'a Path,
    pub rows: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub val: Option<&'a Path>,
    pub holdout: f64,
    pub epochs: Option<usize>,
    pub out: &'a Path,
    pub work_dir: Option<&'a Path>,
    pub threads: usize,
}

pub fn ablate(a: AblateArgs<'_>) -> Result {
    let mut base = match a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(e) = a.epochs {
        base.epochs = e;
        base.warmup_epochs = base.warmup_epochs.min(e.saturating_sub(1));
    }
    let rows = match a.rows {
        Some(p) => AblationRow::load_all(p)?,
        None => experiments::default_rows(),
    };
    let (train_set, val_set) = split_data(a.data, a.val, a.holdout)?;
    let val_set = val_set.ok_or_else(|| CliError::Usage("ablation needs --val or a positive --holdout".into()))?;
    let work = match a.work_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            parent.join("ablation_runs")
        }
    };
    let results = experiments::run_ablation(&base, &rows, &train_set, &val_set, &work, a.threads)?;
    experiments::write_ablation_csv(&results, a.out)?;
    println!("{:<11} {:<18} {:>7} {:>7} {:>7} {:>9}", "table", "config", "F", "MAE", "S", "params");
    for r in &results {
        println!(
            "{:<11} {:<18} {:>7.4} {:>7.4} {:>7.4} {:>9}",
            r.table, r.config, r.f_beta, r.mae, r.s_alpha, r.params
        );
    }
    for d in experiments::directions(&results) {
        println!("{}: {}", d.claim, if d.holds { "holds" } else { "does not hold" });
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn print_breakdown(b: &Breakdown, unit: &str) {
    for c in Component::ALL {
        println!("{:<12} {:>16} {unit}", c.label(), b.get(c));
    }
    println!("{:<12} {:>16} {unit}", "total", b.total);
}

pub fn count_params(config: Option<&Path>, preset: Option<Preset>, resnet50: bool) -> Result {
    let cfg = train_config(config, preset)?;
    let mut model = cfg.model_config();
    if resnet50 {
        model.backbone = BackboneConfig::resnet50(cfg.input_size);
    }
    let b = trainer::count_params(&model)?;
    println!("interactor: {}", model.interactor.label());
    print_breakdown(&b, "params");
    println!(
        "interactor body (one copy): {} params",
        trainer::accounting::interactor_body_params(&model.interactor)
    );
    println!("total {:.3}M", b.total as f64 / 1e6);
    Ok(())
}

pub fn flops(config: Option<&Path>, preset: Option<Preset>, size: usize) -> Result {
    let cfg = train_config(config, preset)?;
    let mut model: ModelConfig = cfg.model_config();
    model.backbone.input_size = (size, size);
    let r = trainer::estimate_flops(&model)?;
    println!("input {size}x{size}; FLOPs = 2 x multiply-accumulates");
    print_breakdown(&r.flops, "FLOPs");
    println!(
        "total {:.3} GFLOPs ({:.3} GMACs)",
        r.flops.total as f64 / 1e9,
        r.macs.total as f64 / 1e9
    );
    Ok(())
}

pub fn gradcheck(module: Option<&str>, seeds: u64) -> Result {
    let cases: Vec<&str> = match module {
        Some(m) => vec![m],
        None => gradcheck::CASES.to_vec(),
    };
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let cfg = GradcheckConfig::default();
    let mut failed = Vec::new();
    for case in cases {
        let mut worst = (0.0f64, 0u64, String::new());
        for seed in 0..seeds {
            let r = gradcheck::run_case(case, seed, &cfg)?;
            if let Some(w) = r.worst().filter(|w| w.max_rel_err >= worst.0) {
                worst = (w.max_rel_err, seed, w.name.clone());
            }
        }
        let pass = worst.0 <= cfg.tol;
        println!(
            "{} {case:<18} max rel err {:.3e} (seed {}, {})",
            if pass { "PASS" } else { "FAIL" },
            worst.0,
            worst.1,
            worst.2
        );
        if !pass {
            failed.push(case);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub fn interp_demo(image: &Path, rate: usize, out_dir: &Path) -> Result {
    let img = netpbm::read_rgb(image)?;
    let src: Vec<f64> = img.data.iter().map(|&v| f64::from(v)).collect();
    let r = experiments::interp_round_trip(&src, 3, img.height, img.width, rate)?;
    create_dir(out_dir)?;
    let save = |name: &str, v: &[f64], scale: f64| -> Result {
        let rgb = netpbm::RgbImage {
            width: img.width,
            height: img.height,
            data: v.iter().map(|&x| (x * scale) as f32).collect(),
        };
        netpbm::write_rgb(&out_dir.join(name), &rgb)?;
        Ok(())
    };
    save("up_down.ppm", &r.up_down, 1.0)?;
    save("down_up.ppm", &r.down_up, 1.0)?;
    // Differences are small; stretch them so the largest maps to white.
    let peak = r
        .diff_up_down
        .iter()
        .chain(&r.diff_down_up)
        .copied()
        .fold(0.0, f64::max);
    let stretch = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    save("diff_up_down.ppm", &r.diff_up_down, stretch)?;
    save("diff_down_up.ppm", &r.diff_down_up, stretch)?;
    let summary = format!(
        "rate {rate}\nl2_up_down {:.6}\nl2_down_up {:.6}\ndiff_scale {stretch:.6}\n",
        r.norm_up_down, r.norm_down_up
    );
    let path = out_dir.join("summary.txt");
    std::fs::write(&path, &summary).map_err(|e| ciisod::Error::Io { path, source: e })?;
    print!("{summary}");
    Ok(())
}

pub fn dump_features(ckpt: &Path, image: &Path, out_dir: &Path, stage: Stage) -> Result {
    let model = SodModel::<f32>::load(ckpt)?;
    let img = netpbm::read_rgb(image)?;
    let (h, w) = model.config().backbone.input_size;
    let data = if (img.height, img.width) == (h, w) {
        img.data
    } else {
        data::resize_planar(&img.data, 3, img.height, img.width, h, w)
    };
    let x = Tensor::try_new(Shape::new(1, 3, h, w), data)?;
    let f = no_grad(|| model.forward_features(&x, Mode::Eval))?;
    let (maps, tag) = match stage {
        Stage::Before => (&f.pyramid.stages, "before"),
        Stage::After => (&f.lateral, "after"),
    };
    for p in interactors::dump_features(maps, out_dir, tag)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
