use std::collections::BTreeSet;

use tch::Tensor;

use crate::error::{Error, Result};
use crate::guidance::{class_feature_stats, ClassFeatureStats, LabeledImageSet};
use crate::models::Classifier;

const CHUNK: i64 = 1000;

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate_accuracy(model: &Classifier, data: &LabeledImageSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let pred = model.predict(data.images(), CHUNK)?.argmax(-1, false);
    let correct = pred.eq_tensor(&data.labels_tensor()).sum(tch::Kind::Int64).int64_value(&[]);
    Ok(correct as f64 / data.len() as f64)
}

/// Mean over classes of `‖μ_synth,k − μ_guide,k‖₂` given per-class stats.
/// Both sides must cover the same classes.
pub fn alignment_from_stats(synth: &ClassFeatureStats, guide: &ClassFeatureStats) -> Result<f64> {
    let a: BTreeSet<i64> = synth.per_class.keys().copied().collect();
    let b: BTreeSet<i64> = guide.per_class.keys().copied().collect();
    let missing: Vec<i64> = a.symmetric_difference(&b).copied().collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    synth.mean_distance(guide).ok_or(Error::Coverage(vec![]))
}

/// Alignment metric on precomputed features.
pub fn alignment_from_features(
    synth: &Tensor,
    synth_labels: &[i64],
    guide: &Tensor,
    guide_labels: &[i64],
    nc: i64,
) -> Result<f64> {
    alignment_from_stats(
        &ClassFeatureStats::from_features(synth, synth_labels, nc)?,
        &ClassFeatureStats::from_features(guide, guide_labels, nc)?,
    )
}

/// Class-mean distance between two sets on `model`'s penultimate features.
pub fn class_alignment_metric(model: &Classifier, synth: &LabeledImageSet, guide: &LabeledImageSet) -> Result<f64> {
    alignment_from_stats(&class_feature_stats(model, synth)?, &class_feature_stats(model, guide)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{Normalization, SetMeta, SetSource};
    use crate::models::{build_classifier, ArchId, ClassifierSpec};
    use tch::Kind;

    fn set(n: i64, nc: i64, seed: u64) -> LabeledImageSet {
        let images = crate::rng::uniform(&mut crate::rng::rng(seed), &[n, 1, 8, 8], 0.0, 1.0, Kind::Float);
        LabeledImageSet::new(
            images,
            (0..n).map(|i| i % nc).collect(),
            SetMeta {
                dataset_name: "toy".into(),
                nc,
                spc: None,
                normalization: Normalization::identity(1),
                source: SetSource::Real,
            },
        )
        .unwrap()
    }

    #[test]
    fn constant_predictor_scores_one_over_nc() {
        let mut m = build_classifier(&ClassifierSpec::new(ArchId::Mlp, 4, [1, 8, 8]), 0).unwrap();
        tch::no_grad(|| {
            for (name, mut v) in m.var_store().variables() {
                if name.starts_with("head") {
                    let _ = v.zero_();
                    if name.ends_with("bias") {
                        let _ = v.get(2).fill_(1.0);
                    }
                }
            }
        });
        m.freeze();
        let d = set(40, 4, 1);
        assert!((evaluate_accuracy(&m, &d).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unit_vector_construction_gives_one() {
        let nc = 3;
        let guide = Tensor::zeros([6, 3], (Kind::Double, tch::Device::Cpu));
        let synth = Tensor::eye(3, (Kind::Double, tch::Device::Cpu));
        let v = alignment_from_features(&synth, &[0, 1, 2], &guide, &[0, 1, 2, 0, 1, 2], nc).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_sets_align_perfectly_and_permutation_is_irrelevant() {
        let m = build_classifier(&ClassifierSpec::new(ArchId::Mlp, 3, [1, 8, 8]), 0).unwrap();
        let s = set(12, 3, 2);
        assert_eq!(class_alignment_metric(&m, &s, &s).unwrap(), 0.0);
        let idx: Vec<usize> = (0..12).rev().collect();
        let p = s.select(&idx, s.meta.clone()).unwrap();
        assert!(class_alignment_metric(&m, &p, &s).unwrap() < 1e-6);
    }

    #[test]
    fn coverage_mismatch_lists_classes() {
        let f = Tensor::zeros([2, 2], (Kind::Double, tch::Device::Cpu));
        let err = alignment_from_features(&f, &[0, 1], &f, &[0, 2], 3).unwrap_err();
        assert!(matches!(err, Error::Coverage(ref v) if v == &vec![1, 2]));
    }
}
