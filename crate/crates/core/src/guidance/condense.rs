//! Distribution-matching condenser: optimizes a few images per class so
//! their mean penultimate features (under random augmentation) match those
//! of real batches of the same class.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::fewshot::stratified_indices;
use super::set::{LabeledImageSet, SetMeta, SetSource};
use super::stats::ClassFeatureStats;
use crate::error::{Error, Result};
use crate::inversion::{diff_augment, AugOp};
use crate::models::{Classifier, Forward};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CondenseOptions {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Real images per class per step.
    pub real_batch: usize,
    /// Off by default: with a trained teacher, augmented class means drift
    /// away from the clean ones the distance is measured on.
    pub diffaug: Vec<AugOp>,
}

impl Default for CondenseOptions {
    fn default() -> Self {
        CondenseOptions {
            steps: 1000,
            lr: 0.01,
            momentum: 0.5,
            real_batch: 128,
            diffaug: Vec::new(),
        }
    }
}

/// Result of a condensation run with its distance trace.
#[derive(Debug)]
pub struct Condensed {
    pub set: LabeledImageSet,
    /// Mean class-mean distance to the real data at initialization.
    pub initial_distance: f64,
    /// Same distance for the returned (best) iterate.
    pub best_distance: f64,
    pub best_step: usize,
}

pub fn condense_dm(
    data: &LabeledImageSet,
    spc: usize,
    model: &Classifier,
    steps: usize,
    seed: u64,
) -> Result<LabeledImageSet> {
    let opts = CondenseOptions {
        steps,
        ..Default::default()
    };
    Ok(condense_dm_with(data, spc, model, &opts, seed)?.set)
}

/// Condenses `data` to `spc` images per class, starting from a stratified
/// real sample drawn with `seed`. The lowest-distance iterate is returned.
pub fn condense_dm_with(
    data: &LabeledImageSet,
    spc: usize,
    model: &Classifier,
    opts: &CondenseOptions,
    seed: u64,
) -> Result<Condensed> {
    let init_idx = stratified_indices(data, spc, seed)?;
    let meta = SetMeta {
        spc: Some(spc),
        source: SetSource::Condensed,
        ..data.meta.clone()
    };
    let init = data.select(&init_idx, meta.clone())?;
    let nc = data.nc();
    let labels = init.labels().to_vec();

    let real_stats = ClassFeatureStats::from_features(&model.predict_features(data.images(), 512)?, data.labels(), nc)?;
    let distance = |imgs: &Tensor| -> Result<f64> {
        let f = model.predict_features(imgs, 512)?;
        let s = ClassFeatureStats::from_features(&f, &labels, nc)?;
        s.mean_distance(&real_stats)
            .ok_or_else(|| Error::Numerical("no shared classes".into()))
    };

    let mut syn = init.images().copy();
    let initial_distance = distance(&syn)?;
    let mut best = (initial_distance, 0usize, syn.copy());
    let mut velocity = syn.zeros_like();
    let by_class: BTreeMap<i64, Vec<usize>> = data.class_indices();
    let syn_rows: Tensor = Tensor::from_slice(&labels);

    for step in 1..=opts.steps {
        let step_seed = rng::derive(seed, "condense", step as u64);
        let mut r = rng::rng(step_seed);
        let mut real_idx = Vec::new();
        let mut real_lab = Vec::new();
        for c in 0..nc {
            let members = &by_class[&c];
            let n = members.len().min(opts.real_batch);
            for i in index::sample(&mut r, members.len(), n) {
                real_idx.push(members[i] as i64);
                real_lab.push(c);
            }
        }
        let (real_x, _) = data.batch(&real_idx);
        let real_means = tch::no_grad(|| -> Result<Tensor> {
            let xa = diff_augment(&real_x, &opts.diffaug, rng::derive(step_seed, "real", 0))?;
            let f = model.features_with(&xa, &mut Forward::eval())?;
            Ok(class_means(&f, &Tensor::from_slice(&real_lab), nc))
        })?;

        let x = syn.detach().set_requires_grad(true);
        let xa = diff_augment(&x, &opts.diffaug, rng::derive(step_seed, "syn", 0))?;
        let f = model.features_with(&xa, &mut Forward::eval())?;
        let syn_means = class_means(&f, &syn_rows, nc);
        let loss = (syn_means - real_means).square().sum(Kind::Float);
        let g = Tensor::run_backward(&[loss], &[&x], false, false).remove(0);
        tch::no_grad(|| {
            velocity = &velocity * opts.momentum + &g;
            syn = (&syn - &velocity * opts.lr).clamp(0.0, 1.0);
        });

        let d = distance(&syn)?;
        if d < best.0 {
            best = (d, step, syn.copy());
        }
    }

    Ok(Condensed {
        set: LabeledImageSet::new(best.2, labels, meta)?,
        initial_distance,
        best_distance: best.0,
        best_step: best.1,
    })
}

/// `(nc, d)` class means; rows for absent classes are zero.
fn class_means(features: &Tensor, labels: &Tensor, nc: i64) -> Tensor {
    let onehot = labels.one_hot(nc).to_kind(features.kind());
    let counts = onehot.sum_dim_intlist(0, false, None).clamp_min(1.0).unsqueeze(1);
    onehot.transpose(0, 1).matmul(features) / counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::Normalization;
    use crate::models::{build_classifier, ArchId, ClassifierSpec};

    fn toy_data() -> LabeledImageSet {
        // class c is a noisy image with mean brightness (c + 1) / 4
        let mut r = rng::rng(5);
        let n = 3 * 12;
        let labels: Vec<i64> = (0..n).map(|i| i % 3).collect();
        let base = Tensor::from_slice(&labels).to_kind(Kind::Float).view([n, 1, 1, 1]) * 0.25 + 0.25;
        let noise = rng::uniform(&mut r, &[n, 1, 16, 16], -0.2, 0.2, Kind::Float);
        LabeledImageSet::new(
            (base + noise).clamp(0.0, 1.0),
            labels,
            SetMeta {
                dataset_name: "toy".into(),
                nc: 3,
                spc: None,
                normalization: Normalization::identity(1),
                source: SetSource::Real,
            },
        )
        .unwrap()
    }

    fn model() -> Classifier {
        build_classifier(&ClassifierSpec::new(ArchId::Mlp, 3, [1, 16, 16]), 1).unwrap()
    }

    #[test]
    fn zero_steps_returns_initializer() {
        let d = toy_data();
        let m = model();
        let c = condense_dm(&d, 2, &m, 0, 4).unwrap();
        let few = crate::guidance::sample_few_shot(&d, 2, 4).unwrap();
        assert!(c.images().equal(few.images()));
        assert_eq!(c.labels(), few.labels());
        assert_eq!(c.meta.source, SetSource::Condensed);
    }

    #[test]
    fn optimization_never_worsens_best_distance() {
        let d = toy_data();
        let m = model();
        let opts = CondenseOptions {
            steps: 30,
            lr: 0.1,
            real_batch: 8,
            ..Default::default()
        };
        let c = condense_dm_with(&d, 1, &m, &opts, 2).unwrap();
        assert!(c.best_distance <= c.initial_distance);
        assert_eq!(c.set.len(), 3);
        assert!(c.set.class_counts().values().all(|&n| n == 1));
        let min = c.set.images().min().double_value(&[]);
        let max = c.set.images().max().double_value(&[]);
        assert!(min >= 0.0 && max <= 1.0);
    }

    #[test]
    fn insufficient_class_is_an_error() {
        let d = toy_data();
        assert!(matches!(condense_dm(&d, 13, &model(), 0, 0), Err(Error::Insufficient(_))));
    }

    #[test]
    fn class_means_match_loop() {
        let f = rng::randn(&mut rng::rng(1), &[5, 2], Kind::Double);
        let l = Tensor::from_slice(&[0i64, 2, 0, 2, 2]);
        let m = class_means(&f, &l, 3);
        let e0 = (f.get(0) + f.get(2)) / 2.0;
        assert!(m.get(0).allclose(&e0, 1e-12, 1e-12, false));
        assert_eq!(m.get(1).abs().sum(Kind::Double).double_value(&[]), 0.0);
    }
}
