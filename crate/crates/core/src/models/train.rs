//! Supervised teacher training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Kind, Tensor};

use super::classifier::{build_classifier, Classifier, ClassifierSpec};
use crate::error::{Error, Result};
use crate::guidance::LabeledImageSet;
use crate::harness::evaluate_accuracy;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHp {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHp {
    fn default() -> Self {
        TrainHp {
            epochs: 10,
            lr: 1e-3,
            batch_size: 128,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains a classifier with Adam and a cosine learning-rate schedule and
/// reports held-out accuracy.
pub fn train_teacher(
    spec: &ClassifierSpec,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    hp: &TrainHp,
) -> Result<(Classifier, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Insufficient("training set is empty".into()));
    }
    if hp.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut model = build_classifier(spec, hp.seed)?;
    model.set_normalization(train.meta.normalization.clone())?;
    let mut opt = nn::adam(0.9, 0.999, hp.weight_decay).build(model.var_store(), hp.lr)?;
    let n = train.len();
    let steps_per_epoch = n.div_ceil(hp.batch_size);
    let total = (steps_per_epoch * hp.epochs).max(1);
    let mut order: Vec<i64> = (0..n as i64).collect();
    let mut r = rng::rng(rng::derive(hp.seed, "teacher-shuffle", 0));
    let labels = train.labels_tensor();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let mut step = 0usize;
    for epoch in 0..hp.epochs {
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let lr = hp.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            opt.set_lr(lr);
            let idx = Tensor::from_slice(chunk);
            let x = train.images().index_select(0, &idx);
            let y = labels.index_select(0, &idx);
            let logits = model.logits_t(&x, true)?;
            let loss = logits.cross_entropy_for_logits(&y);
            let v = loss.double_value(&[]);
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "teacher loss diverged at epoch {epoch}, step {step}: {v}"
                )));
            }
            opt.backward_step(&loss);
            sum += v * chunk.len() as f64;
            step += 1;
        }
        let mean = sum / n as f64;
        log::info!("teacher epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let train_accuracy = evaluate_accuracy(&model, train)?;
    let test_accuracy = evaluate_accuracy(&model, test)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
            test_accuracy,
        },
    ))
}

/// Labels as a one-hot float matrix.
pub fn one_hot(labels: &[i64], nc: i64, kind: Kind) -> Tensor {
    Tensor::from_slice(labels).one_hot(nc).to_kind(kind)
}
