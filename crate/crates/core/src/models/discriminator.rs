//! Feature discriminator: Linear(d_feat + nc → 1024) → ReLU → Dropout(0.5)
//! → Linear(1024 → 1). Emits raw scores; the sigmoid lives in the loss.

use serde::{Deserialize, Serialize};
use tch::{nn, Device, Tensor};

use super::init;
use crate::error::{Error, Result};
use crate::rng::{self, SeedRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub feat_dim: i64,
    pub num_classes: i64,
    #[serde(default = "default_hidden")]
    pub hidden: i64,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

fn default_hidden() -> i64 {
    1024
}

fn default_dropout() -> f64 {
    0.5
}

impl DiscriminatorSpec {
    pub fn new(feat_dim: i64, num_classes: i64) -> Self {
        DiscriminatorSpec {
            feat_dim,
            num_classes,
            hidden: default_hidden(),
            dropout_rate: default_dropout(),
        }
    }

    pub fn input_width(&self) -> i64 {
        self.feat_dim + self.num_classes
    }

    /// `(in + 1)·hidden + (hidden + 1)`
    pub fn param_count(&self) -> i64 {
        (self.input_width() + 1) * self.hidden + (self.hidden + 1)
    }
}

#[derive(Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    vs: nn::VarStore,
    fc1: nn::Linear,
    fc2: nn::Linear,
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator> {
    if spec.feat_dim < 1 || spec.num_classes < 2 || spec.hidden < 1 {
        return Err(Error::Config(format!(
            "discriminator needs feat_dim >= 1, nc >= 2 (got {}, {})",
            spec.feat_dim, spec.num_classes
        )));
    }
    if !(0.0..1.0).contains(&spec.dropout_rate) {
        return Err(Error::Config(format!("dropout rate {} not in [0, 1)", spec.dropout_rate)));
    }
    let vs = nn::VarStore::new(Device::Cpu);
    let root = vs.root();
    let d = Discriminator {
        fc1: nn::linear(&root / "fc1", spec.input_width(), spec.hidden, Default::default()),
        fc2: nn::linear(&root / "fc2", spec.hidden, 1, Default::default()),
        spec: spec.clone(),
        vs,
    };
    init::reinit(&d.vs, seed);
    Ok(d)
}

impl Discriminator {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn param_count(&self) -> i64 {
        self.vs.trainable_variables().iter().map(|t| t.numel() as i64).sum()
    }

    pub fn reinit(&mut self, seed: u64) {
        init::reinit(&self.vs, seed);
    }

    /// Raw scores `(B,)` for inputs `(B, d_feat + nc)`. Dropout is active
    /// only when a mask stream is supplied.
    pub fn forward(&self, input: &Tensor, dropout: Option<&mut SeedRng>) -> Result<Tensor> {
        let s = input.size();
        if s.len() != 2 || s[1] != self.spec.input_width() {
            return Err(Error::Dimension(format!(
                "discriminator expects (B, {}), got {s:?}",
                self.spec.input_width()
            )));
        }
        let mut h = input.apply(&self.fc1).relu();
        if let Some(r) = dropout {
            if self.spec.dropout_rate > 0.0 {
                let mask = rng::dropout_mask(r, &h.size(), self.spec.dropout_rate, h.kind());
                h = h * mask;
            }
        }
        Ok(h.apply(&self.fc2).squeeze_dim(1))
    }

    pub fn to_double(&mut self) {
        self.vs.double();
    }
}
