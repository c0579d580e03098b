//! Training loop, evaluation, and parameter/FLOP accounting.

pub mod accounting;
pub mod schedule;
pub mod sgd;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{self, AugmentConfig, Dataset, Sample};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::interactors::{InteractorConfig, InteractorKind};
use crate::loss::total_loss;
use crate::metrics::{self, Aggregation, ImageEval, MetricsReport};
use crate::model::{ModelConfig, SodModel};
use crate::nn::{self, BnConfig, Mode};
use crate::rng;
use crate::tensor::{no_grad, Parameter, Shape, Tensor};

pub use accounting::{count_model_params, count_params, estimate_flops, Breakdown, FlopsReport};
pub use schedule::lr_at;
pub use sgd::Sgd;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone_max: f64,
    pub lr_rest_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub input_size: usize,
    pub seed: u64,
    pub interactor: InteractorConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub bn: BnConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Weight decay on BN affine parameters.
    #[serde(default = "yes")]
    pub decay_norm: bool,
}

impl TrainConfig {
    /// ResNet-18 schedule at 352x352.
    pub fn paper() -> Self {
        let size = 352;
        TrainConfig {
            epochs: 32,
            batch_size: 30,
            lr_backbone_max: 0.005,
            lr_rest_max: 0.05,
            momentum: 0.9,
            weight_decay: 5e-5,
            warmup_epochs: 8,
            input_size: size,
            seed: 0,
            interactor: InteractorConfig::of_kind(InteractorKind::RgcDagger, 64),
            backbone: BackboneConfig::resnet18(size),
            decoder: DecoderConfig::default(),
            bn: BnConfig::default(),
            augment: AugmentConfig::default(),
            decay_norm: true,
        }
    }

    /// Tiny encoder at 64x64 for CPU runs.
    pub fn desk() -> Self {
        let size = 64;
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            warmup_epochs: 5,
            input_size: size,
            interactor: InteractorConfig::of_kind(InteractorKind::RgcDagger, 16),
            backbone: BackboneConfig::tiny(size),
            ..Self::paper()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            interactor: self.interactor.clone(),
            decoder: self.decoder,
            bn: self.bn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.input_size != (self.input_size, self.input_size) {
            return Err(Error::Config(format!(
                "input_size {} disagrees with backbone input {:?}",
                self.input_size, self.backbone.input_size
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        self.backbone.validate()?;
        self.interactor.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Whether a parameter trains at the backbone rate.
pub fn is_backbone(p: &Parameter<f32>) -> bool {
    p.name().starts_with("backbone.")
}

/// Validation scores after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValScore {
    pub f_beta_max: f64,
    pub mae: f64,
    pub s_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<ValScore>,
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainPaths {
    /// Final weights; rewritten after every epoch so it always holds the
    /// last completed epoch.
    pub last: PathBuf,
    /// Weights of the epoch with the highest validation max-F.
    pub best: PathBuf,
    /// Per-step CSV `epoch,step,lr_backbone,lr_rest,loss`.
    pub log: PathBuf,
    /// Per-epoch CSV `epoch,mean_loss,val_f_beta_max,val_mae,val_s_alpha`.
    pub epoch_log: PathBuf,
}

impl TrainPaths {
    pub fn for_output(out: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = out.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        TrainPaths {
            last: out.to_path_buf(),
            best: with(".best"),
            log: with(".log.csv"),
            epoch_log: with(".epochs.csv"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean loss of the freshly initialized model over the training set.
    pub initial_loss: f64,
    /// Mean step loss of the last epoch.
    pub final_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub paths: TrainPaths,
}

/// Resizes a sample to `size x size` if needed.
pub fn fit_sample(s: &Sample, size: usize) -> Sample {
    if (s.height, s.width) == (size, size) {
        return s.clone();
    }
    Sample {
        id: s.id.clone(),
        height: size,
        width: size,
        image: data::resize_planar(&s.image, 3, s.height, s.width, size, size),
        mask: data::resize_mask(&s.mask, s.height, s.width, size, size),
    }
}

fn mean_loss(model: &SodModel<f32>, samples: &[Sample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = data::batch::<f32>(&refs)?;
        let l = no_grad(|| -> Result<f32> {
            Ok(total_loss(&model.forward(&x, Mode::Train)?, &y)?.item())
        })?;
        total += f64::from(l) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Trains a fresh model. Single-threaded and deterministic in `cfg.seed`.
///
/// Writes the checkpoints and logs listed in [`TrainPaths`]. A non-finite
/// loss or gradient aborts with [`Error::Numerical`]; the last-epoch
/// checkpoint on disk is then the last good state.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: Option<&Dataset>, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let size = cfg.input_size;
    let samples: Vec<Sample> = train_set.samples.iter().map(|s| fit_sample(s, size)).collect();
    let model = SodModel::<f32>::new(&cfg.model_config(), cfg.seed)?;
    let params = nn::parameters(&model);
    let paths = TrainPaths::for_output(out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    // Measure on a throwaway copy so the running statistics of the trained
    // model start from their initial values.
    let initial_loss = {
        let probe = SodModel::<f32>::new(&cfg.model_config(), cfg.seed)?;
        mean_loss(&probe, &samples, cfg.batch_size)?
    };
    log::info!("initial loss {initial_loss:.4}");

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut aug_rng = rng::stream(cfg.seed, rng::AUGMENT);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, cfg.decay_norm);

    let open = |p: &Path| std::fs::File::create(p).map_err(|e| Error::io(p, e));
    let mut log_w = std::io::BufWriter::new(open(&paths.log)?);
    let mut epoch_w = std::io::BufWriter::new(open(&paths.epoch_log)?);
    writeln!(log_w, "epoch,step,lr_backbone,lr_rest,loss").map_err(io_err(&paths.log))?;
    writeln!(epoch_w, "epoch,mean_loss,val_f_beta_max,val_mae,val_s_alpha").map_err(io_err(&paths.epoch_log))?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = data::shuffled(samples.len(), &mut shuffle);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| data::augment(&samples[i], &cfg.augment, &mut aug_rng))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, y) = data::batch::<f32>(&refs)?;
            let lr_b = lr_at(step, total_steps, warmup_steps, cfg.lr_backbone_max);
            let lr_r = lr_at(step, total_steps, warmup_steps, cfg.lr_rest_max);

            nn::zero_grad(&model);
            let loss = total_loss(&model.forward(&x, Mode::Train)?, &y)?;
            let value = f64::from(loss.item());
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {value} at epoch {epoch} step {step}; last good weights are in {}",
                    paths.last.display()
                )));
            }
            loss.backward()?;
            opt.step(&params, |p| if is_backbone(p) { lr_b } else { lr_r })
                .map_err(|e| Error::Numerical(format!("{e}; last good weights are in {}", paths.last.display())))?;
            writeln!(log_w, "{epoch},{step},{lr_b:.8},{lr_r:.8},{value:.6}").map_err(io_err(&paths.log))?;
            loss_sum += value;
            step += 1;
        }
        let mean = loss_sum / steps_per_epoch as f64;
        let val = match val_set {
            Some(v) => {
                let r = evaluate(&model, v, 1, Aggregation::PerImage)?;
                Some(ValScore {
                    f_beta_max: r.f_beta_max,
                    mae: r.mae,
                    s_alpha: r.s_alpha,
                })
            }
            None => None,
        };
        model.save(&paths.last)?;
        let score = val.as_ref().map_or(-mean, |v| v.f_beta_max);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((epoch, score));
            model.save(&paths.best)?;
        }
        let fmt = |f: fn(&ValScore) -> f64| val.as_ref().map_or(String::new(), |v| format!("{:.6}", f(v)));
        writeln!(
            epoch_w,
            "{epoch},{mean:.6},{},{},{}",
            fmt(|v| v.f_beta_max),
            fmt(|v| v.mae),
            fmt(|v| v.s_alpha)
        )
        .map_err(io_err(&paths.epoch_log))?;
        log_w.flush().map_err(io_err(&paths.log))?;
        epoch_w.flush().map_err(io_err(&paths.epoch_log))?;
        match &val {
            Some(v) => log::info!(
                "epoch {epoch}/{}: loss {mean:.4}, val maxF {:.4}, MAE {:.4}",
                cfg.epochs,
                v.f_beta_max,
                v.mae
            ),
            None => log::info!("epoch {epoch}/{}: loss {mean:.4}", cfg.epochs),
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: mean,
            val,
        });
    }
    Ok(TrainOutcome {
        initial_loss,
        final_loss: epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        epochs,
        best_epoch: best.map(|(e, _)| e),
        paths,
    })
}

/// Saliency map of a planar `(3, h, w)` image at its own resolution. The
/// image is resized to the model's input size and the prediction back.
pub fn predict(model: &SodModel<f32>, image: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    let (mh, mw) = model.config().backbone.input_size;
    let input = if (h, w) == (mh, mw) {
        image.to_vec()
    } else {
        data::resize_planar(image, 3, h, w, mh, mw)
    };
    let x = Tensor::try_new(Shape::new(1, 3, mh, mw), input)?;
    let p = no_grad(|| model.forward(&x, Mode::Eval))?;
    Ok(if (h, w) == (mh, mw) {
        p.to_vec()
    } else {
        data::resize_planar(p.data(), 1, mh, mw, h, w)
    })
}

/// Scores predicted maps against the dataset masks. Work is split into
/// contiguous chunks over `threads` workers and reduced in image order, so
/// the report does not depend on the thread count.
pub fn evaluate_with<F>(ds: &Dataset, threads: usize, aggregation: Aggregation, predict_one: F) -> Result<MetricsReport>
where
    F: Fn(&Sample) -> Result<Vec<f32>> + Sync,
{
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let threads = threads.clamp(1, ds.len());
    let chunk = ds.len().div_ceil(threads);
    let score = |s: &Sample| -> Result<ImageEval> {
        let pred = predict_one(s)?;
        let p: Vec<f64> = pred.iter().map(|&v| f64::from(v)).collect();
        let g: Vec<f64> = s.mask.iter().map(|&v| f64::from(v)).collect();
        ImageEval::new(&p, &g, s.height, s.width)
    };
    let parts: Vec<Result<Vec<ImageEval>>> = if threads == 1 {
        vec![ds.samples.iter().map(score).collect()]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ds
                .samples
                .chunks(chunk)
                .map(|part| scope.spawn(|| part.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut images = Vec::with_capacity(ds.len());
    for p in parts {
        images.extend(p?);
    }
    metrics::summarize(&images, aggregation)
}

/// Evaluates a model with eval-mode batch norm.
pub fn evaluate(model: &SodModel<f32>, ds: &Dataset, threads: usize, aggregation: Aggregation) -> Result<MetricsReport> {
    evaluate_with(ds, threads, aggregation, |s| predict(model, &s.image, s.height, s.width))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        TrainConfig::paper().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        let d = TrainConfig::desk();
        assert_eq!((d.epochs, d.batch_size, d.warmup_epochs, d.input_size), (20, 8, 5, 64));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig::desk();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn size_disagreement_rejected() {
        let mut cfg = TrainConfig::desk();
        cfg.input_size = 96;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
