//! Growing union of guidance and synthetic records, sampled uniformly.

use std::collections::VecDeque;

use rand::Rng;
use tch::Tensor;

use crate::error::{Error, Result};
use crate::guidance::{LabeledImageSet, SetSource};
use crate::inversion::SyntheticBatch;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolSource {
    Condensed,
    Synthetic,
    Fewshot,
}

#[derive(Debug)]
struct Entry {
    image: Tensor,
    label: i64,
    source: PoolSource,
}

#[derive(Debug)]
pub struct PoolBatch {
    pub images: Tensor,
    pub labels: Vec<i64>,
    pub sources: Vec<PoolSource>,
}

/// Guidance entries are permanent; synthetic entries are evicted oldest
/// first once `capacity` is exceeded.
#[derive(Debug, Default)]
pub struct SyntheticPool {
    guidance: Vec<Entry>,
    synthetic: VecDeque<Entry>,
    capacity: Option<usize>,
    evicted: usize,
}

impl SyntheticPool {
    pub fn new(capacity: Option<usize>) -> Self {
        SyntheticPool {
            capacity,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.guidance.len() + self.synthetic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn guidance_len(&self) -> usize {
        self.guidance.len()
    }

    pub fn synthetic_len(&self) -> usize {
        self.synthetic.len()
    }

    /// Total synthetic records evicted so far.
    pub fn evicted(&self) -> usize {
        self.evicted
    }

    pub fn add_synthetic(&mut self, batch: &SyntheticBatch) {
        let images = batch.images.detach();
        for (i, &y) in batch.pseudo_labels.iter().enumerate() {
            self.synthetic.push_back(Entry {
                image: images.get(i as i64),
                label: y,
                source: PoolSource::Synthetic,
            });
        }
        self.evict();
    }

    pub fn add_guidance(&mut self, set: &LabeledImageSet) {
        let source = match set.meta.source {
            SetSource::Fewshot | SetSource::Real => PoolSource::Fewshot,
            SetSource::Condensed => PoolSource::Condensed,
            SetSource::Synthetic => PoolSource::Synthetic,
        };
        for (i, &y) in set.labels().iter().enumerate() {
            self.guidance.push(Entry {
                image: set.images().get(i as i64),
                label: y,
                source,
            });
        }
        self.evict();
    }

    fn evict(&mut self) {
        if let Some(cap) = self.capacity {
            while self.len() > cap && self.synthetic.pop_front().is_some() {
                self.evicted += 1;
            }
        }
    }

    fn entry(&self, i: usize) -> &Entry {
        if i < self.guidance.len() {
            &self.guidance[i]
        } else {
            &self.synthetic[i - self.guidance.len()]
        }
    }

    /// `n` records drawn uniformly with replacement.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PoolBatch> {
        if self.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut r = rng::rng(seed);
        let picks: Vec<&Entry> = (0..n).map(|_| self.entry(r.gen_range(0..self.len()))).collect();
        let images: Vec<&Tensor> = picks.iter().map(|e| &e.image).collect();
        Ok(PoolBatch {
            images: Tensor::stack(&images, 0),
            labels: picks.iter().map(|e| e.label).collect(),
            sources: picks.iter().map(|e| e.source).collect(),
        })
    }

    /// The most recent `n` synthetic records (fewer if not available).
    pub fn recent_synthetic(&self, n: usize) -> Option<(Tensor, Vec<i64>)> {
        let k = self.synthetic.len().min(n);
        if k == 0 {
            return None;
        }
        let tail: Vec<&Entry> = self.synthetic.iter().skip(self.synthetic.len() - k).collect();
        let images: Vec<&Tensor> = tail.iter().map(|e| &e.image).collect();
        Some((Tensor::stack(&images, 0), tail.iter().map(|e| e.label).collect()))
    }
}
