//! Real/fake feature–class pairs for the conditional discriminator.

use rand::Rng;
use tch::{Kind, Tensor};

use super::config::WrongLabelMode;
use super::losses::disc_input;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Real,
    Fake,
}

impl Target {
    pub fn value(self) -> f64 {
        match self {
            Target::Real => 1.0,
            Target::Fake => 0.0,
        }
    }
}

/// One discriminator record, materialized for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorPair {
    pub feature: Vec<f64>,
    pub class_onehot: Vec<f64>,
    pub target: Target,
}

/// A side of the discriminator batch, kept as tensors.
#[derive(Debug)]
pub struct PairBatch {
    pub features: Tensor,
    pub labels: Vec<i64>,
    pub target: Target,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Discriminator input rows; class slots are zero when `conditional` is false.
    pub fn input(&self, nc: i64, conditional: bool) -> Tensor {
        disc_input(&self.features, &self.labels, nc, conditional)
    }

    pub fn to_pairs(&self, nc: i64) -> Vec<DiscriminatorPair> {
        let f = self.features.to_kind(Kind::Double).contiguous();
        let d = if f.dim() == 2 { f.size()[1] as usize } else { 0 };
        let flat = Vec::<f64>::try_from(f.view([-1])).unwrap_or_default();
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut oh = vec![0.0; nc as usize];
                oh[y as usize] = 1.0;
                DiscriminatorPair {
                    feature: flat[i * d..(i + 1) * d].to_vec(),
                    class_onehot: oh,
                    target: self.target,
                }
            })
            .collect()
    }
}

fn check_labels(labels: &[i64], nc: i64, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y < 0 || y >= nc) {
        return Err(Error::Config(format!("{what} label {bad} outside [0, {nc})")));
    }
    Ok(())
}

/// Builds the real set `{(φ(x_i), y_i)}` and the fake set made of synthetic
/// features with their pseudo-labels plus condensed features under wrong
/// labels. Inputs are detached.
pub fn build_real_fake_sets(
    cond_features: &Tensor,
    cond_labels: &[i64],
    synth_features: &Tensor,
    y_ps: &[i64],
    nc: i64,
    seed: u64,
    mode: WrongLabelMode,
) -> Result<(PairBatch, PairBatch)> {
    if nc < 2 {
        return Err(Error::Config(format!("wrong-label pairs need nc >= 2, got {nc}")));
    }
    let (cs, ss) = (cond_features.size(), synth_features.size());
    if cs.len() != 2 || ss.len() != 2 || cs[1] != ss[1] {
        return Err(Error::Dimension(format!("feature shapes {cs:?} and {ss:?} disagree")));
    }
    if cs[0] as usize != cond_labels.len() || ss[0] as usize != y_ps.len() {
        return Err(Error::Dimension("feature rows and label counts disagree".into()));
    }
    check_labels(cond_labels, nc, "condensed")?;
    check_labels(y_ps, nc, "pseudo")?;

    let cond = cond_features.detach();
    let real = PairBatch {
        features: cond.shallow_clone(),
        labels: cond_labels.to_vec(),
        target: Target::Real,
    };

    let mut rows: Vec<i64> = Vec::new();
    let mut wrong: Vec<i64> = Vec::new();
    match mode {
        WrongLabelMode::Sampled => {
            let mut r = rng::rng(seed);
            for (i, &y) in cond_labels.iter().enumerate() {
                // uniform over the nc − 1 other classes
                let k = r.gen_range(0..nc - 1);
                rows.push(i as i64);
                wrong.push(if k >= y { k + 1 } else { k });
            }
        }
        WrongLabelMode::Full => {
            for (i, &y) in cond_labels.iter().enumerate() {
                for c in (0..nc).filter(|&c| c != y) {
                    rows.push(i as i64);
                    wrong.push(c);
                }
            }
        }
    }
    let wrong_feats = cond.index_select(0, &Tensor::from_slice(&rows));
    let fake = PairBatch {
        features: Tensor::cat(&[synth_features.detach(), wrong_feats], 0),
        labels: y_ps.iter().copied().chain(wrong).collect(),
        target: Target::Fake,
    };
    Ok((real, fake))
}

/// Generic (class-agnostic) sets: condensed features are real, synthetic
/// ones fake, and no wrong-label pairs are added.
pub fn build_generic_sets(
    cond_features: &Tensor,
    cond_labels: &[i64],
    synth_features: &Tensor,
    y_ps: &[i64],
) -> (PairBatch, PairBatch) {
    (
        PairBatch {
            features: cond_features.detach(),
            labels: cond_labels.to_vec(),
            target: Target::Real,
        },
        PairBatch {
            features: synth_features.detach(),
            labels: y_ps.to_vec(),
            target: Target::Fake,
        },
    )
}
