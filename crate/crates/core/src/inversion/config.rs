use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base model-inversion objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Teacher confidence plus student divergence.
    PlainCe,
    /// `PlainCe` plus batch-norm statistics matching.
    Deepinv,
    /// Contrastive inversion; interface only.
    Cmi,
    /// Novel/memory generator pair; interface only.
    PreDfkd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugOp {
    Color,
    Translation,
    Cutout,
}

impl AugOp {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(AugOp::Color),
            "translation" => Ok(AugOp::Translation),
            "cutout" => Ok(AugOp::Cutout),
            other => Err(Error::Config(format!(
                "unknown augmentation `{other}`; expected color, translation or cutout"
            ))),
        }
    }
}

/// How wrong-label fake pairs are drawn from the guidance records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongLabelMode {
    /// One uniformly drawn wrong class per record, redrawn every step.
    Sampled,
    /// Every wrong class for every record.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub conf: f64,
    pub adv: f64,
    pub bn: f64,
    pub fa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            conf: 1.0,
            adv: 1.0,
            bn: 1.0,
            fa: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl AdamSettings {
    pub fn disc_default() -> Self {
        AdamSettings {
            lr: 0.002,
            beta1: 0.5,
            beta2: 0.999,
        }
    }

    pub fn gen_default() -> Self {
        AdamSettings {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self::disc_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub backend: Backend,
    pub weights: LossWeights,
    /// Class-specific alignment (conditional discriminator) vs generic.
    pub conditional: bool,
    /// Generator updates per synthesis round.
    pub gen_updates: usize,
    /// Discriminator updates per synthesis round.
    pub disc_updates: usize,
    /// Generator and discriminator are reinitialized every this many epochs.
    pub reset_period: usize,
    pub diffaug: Vec<AugOp>,
    pub disc: AdamSettings,
    pub gen: AdamSettings,
    /// Synthetic images per round.
    pub batch_size: usize,
    /// Guidance records fed to the discriminator per update.
    pub guidance_batch: usize,
    pub nz: i64,
    /// Adam step size for the round's latent batch. Zero keeps `z` fixed;
    /// positive values optimize `z` together with the generator.
    pub latent_lr: f64,
    pub gen_width: i64,
    /// Update the discriminator before the generator within a round.
    pub disc_first: bool,
    pub wrong_labels: WrongLabelMode,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            backend: Backend::Deepinv,
            weights: LossWeights::default(),
            conditional: true,
            gen_updates: 2,
            disc_updates: 1,
            reset_period: 50,
            diffaug: vec![AugOp::Color, AugOp::Translation, AugOp::Cutout],
            disc: AdamSettings::disc_default(),
            gen: AdamSettings::gen_default(),
            batch_size: 128,
            guidance_batch: 128,
            nz: 256,
            latent_lr: 0.0,
            gen_width: 64,
            disc_first: false,
            wrong_labels: WrongLabelMode::Sampled,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [("conf", w.conf), ("adv", w.adv), ("bn", w.bn), ("fa", w.fa)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("inversion.weights.{name} must be >= 0, got {v}")));
            }
        }
        if self.gen_updates < 1 {
            return Err(Error::Config("inversion.gen_updates must be >= 1".into()));
        }
        if self.reset_period < 1 {
            return Err(Error::Config("inversion.reset_period must be >= 1".into()));
        }
        if self.batch_size < 1 || self.guidance_batch < 1 {
            return Err(Error::Config("inversion batch sizes must be >= 1".into()));
        }
        if self.nz < 1 || self.gen_width < 1 {
            return Err(Error::Config("inversion.nz and inversion.gen_width must be >= 1".into()));
        }
        if !(self.latent_lr >= 0.0 && self.latent_lr.is_finite()) {
            return Err(Error::Config("inversion.latent_lr must be >= 0".into()));
        }
        for (name, a) in [("disc", &self.disc), ("gen", &self.gen)] {
            if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
                return Err(Error::Config(format!("inversion.{name} Adam settings out of range")));
            }
        }
        if matches!(self.backend, Backend::Cmi | Backend::PreDfkd) {
            return Err(Error::Config(format!(
                "backend {:?} is an interface only; implement `MiBackend` to use it",
                self.backend
            )));
        }
        Ok(())
    }
}
