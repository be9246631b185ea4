use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetSource {
    Real,
    Condensed,
    Fewshot,
    /// Generator output saved for inspection.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMeta {
    pub dataset_name: String,
    pub nc: i64,
    pub spc: Option<usize>,
    pub normalization: Normalization,
    pub source: SetSource,
}

/// Images in `[0, 1]` with integer labels. Used for real data, condensed
/// sets and few-shot subsets alike.
#[derive(Debug)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<i64>,
    pub meta: SetMeta,
}

impl Clone for LabeledImageSet {
    fn clone(&self) -> Self {
        LabeledImageSet {
            images: self.images.copy(),
            labels: self.labels.clone(),
            meta: self.meta.clone(),
        }
    }
}

impl LabeledImageSet {
    /// Builds a set and checks its invariants.
    pub fn new(images: Tensor, labels: Vec<i64>, meta: SetMeta) -> Result<Self> {
        let set = LabeledImageSet {
            images: images.to_kind(Kind::Float).contiguous(),
            labels,
            meta,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.images.size();
        if size.len() != 4 {
            return Err(Error::Dimension(format!(
                "images must be (N, C, H, W), got {size:?}"
            )));
        }
        if size[0] as usize != self.labels.len() {
            return Err(Error::Invariant(format!(
                "{} images but {} labels",
                size[0],
                self.labels.len()
            )));
        }
        if self.meta.nc < 1 {
            return Err(Error::Invariant(format!("nc must be positive, got {}", self.meta.nc)));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l < 0 || l >= self.meta.nc) {
            return Err(Error::Invariant(format!(
                "label {bad} out of range [0, {})",
                self.meta.nc
            )));
        }
        if let Some(spc) = self.meta.spc {
            let counts = self.class_counts();
            for c in 0..self.meta.nc {
                let n = counts.get(&c).copied().unwrap_or(0);
                if n != spc {
                    return Err(Error::Invariant(format!(
                        "spc={spc} but class {c} has {n} records"
                    )));
                }
            }
        }
        let ch = size[1] as usize;
        let norm = &self.meta.normalization;
        if norm.mean.len() != ch || norm.std.len() != ch {
            return Err(Error::Invariant(format!(
                "normalization has {}/{} entries for {ch} channels",
                norm.mean.len(),
                norm.std.len()
            )));
        }
        Ok(())
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn labels_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn nc(&self) -> i64 {
        self.meta.nc
    }

    /// `(C, H, W)`
    pub fn shape(&self) -> [i64; 3] {
        let s = self.images.size();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> BTreeMap<i64, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Indices of records per class, in storage order.
    pub fn class_indices(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut idx: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            idx.entry(l).or_default().push(i);
        }
        idx
    }

    /// New set made of the given records (in the given order).
    pub fn select(&self, indices: &[usize], meta: SetMeta) -> Result<Self> {
        let idx: Vec<i64> = indices.iter().map(|&i| i as i64).collect();
        let images = self.images.index_select(0, &Tensor::from_slice(&idx));
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledImageSet::new(images, labels, meta)
    }

    /// Images for a list of record indices.
    pub fn batch(&self, indices: &[i64]) -> (Tensor, Vec<i64>) {
        let images = self.images.index_select(0, &Tensor::from_slice(indices));
        let labels = indices.iter().map(|&i| self.labels[i as usize]).collect();
        (images, labels)
    }

    /// Raw little-endian image bytes, record-major.
    pub fn image_bytes(&self) -> Vec<u8> {
        let flat = self.images.flatten(0, -1);
        let n = flat.numel();
        let mut v = vec![0f32; n];
        flat.copy_data(&mut v, n);
        let mut out = Vec::with_capacity(n * 4);
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn label_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * 8);
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// SHA-256 over image and label bytes; identifies a training set.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.image_bytes());
        h.update(self.label_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(nc: i64, spc: Option<usize>) -> SetMeta {
        SetMeta {
            dataset_name: "toy".into(),
            nc,
            spc,
            normalization: Normalization::identity(1),
            source: SetSource::Real,
        }
    }

    #[test]
    fn rejects_label_out_of_range() {
        let err = LabeledImageSet::new(Tensor::zeros([2, 1, 2, 2], (Kind::Float, tch::Device::Cpu)), vec![0, 3], meta(3, None));
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn rejects_spc_violation() {
        let err = LabeledImageSet::new(
            Tensor::zeros([3, 1, 2, 2], (Kind::Float, tch::Device::Cpu)),
            vec![0, 0, 1],
            meta(2, Some(2)),
        );
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("class 1 has 1"), "{msg}");
    }

    #[test]
    fn select_keeps_order() {
        let imgs = Tensor::arange(4, (Kind::Float, tch::Device::Cpu)).reshape([4, 1, 1, 1]);
        let set = LabeledImageSet::new(imgs, vec![0, 1, 0, 1], meta(2, None)).unwrap();
        let sub = set.select(&[3, 0], meta(2, None)).unwrap();
        assert_eq!(sub.labels(), &[1, 0]);
        assert_eq!(sub.images().double_value(&[0, 0, 0, 0]), 3.0);
    }
}
