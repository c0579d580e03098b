//! The complete saliency network: encoder, lateral interactors, decoder.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::decoder::{Decoder, DecoderConfig};
use std::path::{Path, PathBuf};

use crate::data::checkpoint;
use crate::error::{Error, Result};
use crate::interactors::{Cii, InteractorConfig, InteractorKind};
use crate::nn::{BnConfig, Mode, Module, ModuleItem};
use crate::rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub interactor: InteractorConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub bn: BnConfig,
}

impl ModelConfig {
    /// ResNet-18 encoder, 64-wide shared RGC with successor input.
    pub fn paper(size: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::resnet18(size),
            interactor: InteractorConfig::of_kind(InteractorKind::RgcDagger, 64),
            decoder: DecoderConfig::default(),
            bn: BnConfig::default(),
        }
    }

    /// Reduced encoder and 16-wide interactor for CPU experiments.
    pub fn desk(size: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::tiny(size),
            interactor: InteractorConfig::of_kind(InteractorKind::RgcDagger, 16),
            decoder: DecoderConfig::default(),
            bn: BnConfig::default(),
        }
    }

    pub fn with_interactor(mut self, interactor: InteractorConfig) -> Self {
        self.interactor = interactor;
        self
    }
}

/// Intermediate maps of one forward pass.
pub struct Features<T: Float> {
    /// Encoder outputs `B_i`.
    pub pyramid: FeaturePyramid<T>,
    /// Interactor outputs `C_i`.
    pub lateral: Vec<Tensor<T>>,
    /// Saliency probabilities.
    pub saliency: Tensor<T>,
}

pub struct SodModel<T: Float> {
    cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub cii: Cii<T>,
    pub decoder: Decoder<T>,
}

impl<T: Float> SodModel<T> {
    /// Deterministic construction: all weights come from the `init` stream of
    /// `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::INIT);
        let backbone = Backbone::new(&cfg.backbone, cfg.bn, &mut rng)?;
        let cii = Cii::new(&cfg.interactor, &cfg.backbone.pyramid_channels(), cfg.bn, &mut rng)?;
        let decoder = Decoder::new(
            &cfg.decoder,
            cii.stages(),
            cfg.interactor.channels,
            cfg.bn,
            &mut rng,
        );
        Ok(SodModel {
            cfg: cfg.clone(),
            backbone,
            cii,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_features(x, mode)?.saliency)
    }

    pub fn forward_features(&self, x: &Tensor<T>, mode: Mode) -> Result<Features<T>> {
        let pyramid = self.backbone.forward(x, mode)?;
        let lateral = self.cii.forward(&pyramid, mode)?;
        let s = x.shape();
        let saliency = self.decoder.forward(&lateral, s.h, s.w, mode)?;
        Ok(Features {
            pyramid,
            lateral,
            saliency,
        })
    }
}

/// Path of the JSON architecture sidecar stored next to a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl<T: Float> SodModel<T> {
    /// Writes the weights to `path` and the architecture to its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(self, path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.cfg)?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    /// Rebuilds the architecture from the sidecar and loads the weights.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let model = SodModel::new(&cfg, 0)?;
        checkpoint::load_checkpoint(&model, path)?;
        Ok(model)
    }
}

impl<T: Float> Module<T> for SodModel<T> {
    fn visit(&self, f: &mut dyn FnMut(ModuleItem<'_, T>)) {
        self.backbone.visit(f);
        self.cii.visit(f);
        self.decoder.visit(f);
    }
}
