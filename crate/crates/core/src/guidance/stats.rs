use std::collections::BTreeMap;

use tch::{Kind, Tensor};

use super::set::LabeledImageSet;
use crate::error::{Error, Result};
use crate::models::Classifier;

const CHUNK: i64 = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMean {
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-class mean penultimate features. `missing` lists classes in
/// `[0, nc)` with no records.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureStats {
    pub per_class: BTreeMap<i64, ClassMean>,
    pub missing: Vec<i64>,
}

impl ClassFeatureStats {
    /// Per-class means of precomputed features `(N, d)`.
    pub fn from_features(features: &Tensor, labels: &[i64], nc: i64) -> Result<Self> {
        let s = features.size();
        if s.len() != 2 || s[0] as usize != labels.len() {
            return Err(Error::Dimension(format!(
                "features {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let d = s[1] as usize;
        let f = Vec::<f64>::try_from(features.to_kind(Kind::Double).contiguous().view([-1]))?;
        let mut sums: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            let e = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
            for (a, b) in e.0.iter_mut().zip(&f[i * d..(i + 1) * d]) {
                *a += b;
            }
            e.1 += 1;
        }
        let per_class: BTreeMap<i64, ClassMean> = sums
            .into_iter()
            .map(|(c, (s, n))| {
                (
                    c,
                    ClassMean {
                        mean: s.into_iter().map(|v| v / n as f64).collect(),
                        count: n,
                    },
                )
            })
            .collect();
        let missing = (0..nc).filter(|c| !per_class.contains_key(c)).collect();
        Ok(ClassFeatureStats { per_class, missing })
    }

    /// Mean over shared classes of the Euclidean distance between class
    /// means. `None` when no class is shared.
    pub fn mean_distance(&self, other: &ClassFeatureStats) -> Option<f64> {
        let d: Vec<f64> = self
            .per_class
            .iter()
            .filter_map(|(c, a)| {
                other.per_class.get(c).map(|b| {
                    a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                })
            })
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }
}

pub fn class_feature_stats(model: &Classifier, set: &LabeledImageSet) -> Result<ClassFeatureStats> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let feats = model.predict_features(set.images(), CHUNK)?;
    ClassFeatureStats::from_features(&feats, set.labels(), set.nc())
}
