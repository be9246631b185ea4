use rand::seq::index;

use super::set::{LabeledImageSet, SetMeta, SetSource};
use crate::error::{Error, Result};
use crate::rng;

/// Class-indices picked by a stratified uniform draw without replacement:
/// class-major, original order within a class.
pub(crate) fn stratified_indices(data: &LabeledImageSet, spc: usize, seed: u64) -> Result<Vec<usize>> {
    if spc == 0 {
        return Err(Error::Config("spc must be >= 1".into()));
    }
    let by_class = data.class_indices();
    let deficient: Vec<String> = (0..data.nc())
        .filter_map(|c| {
            let n = by_class.get(&c).map_or(0, Vec::len);
            (n < spc).then(|| format!("{c} ({n})"))
        })
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Insufficient(format!(
            "need {spc} records per class; deficient classes: {}",
            deficient.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(spc * data.nc() as usize);
    for c in 0..data.nc() {
        let members = &by_class[&c];
        let mut r = rng::rng(rng::derive(seed, "fewshot", c as u64));
        let mut pick: Vec<usize> = index::sample(&mut r, members.len(), spc)
            .into_iter()
            .map(|i| members[i])
            .collect();
        pick.sort_unstable();
        out.extend(pick);
    }
    Ok(out)
}

/// Stratified few-shot subset of real data with exactly `spc` per class.
pub fn sample_few_shot(data: &LabeledImageSet, spc: usize, seed: u64) -> Result<LabeledImageSet> {
    let idx = stratified_indices(data, spc, seed)?;
    data.select(
        &idx,
        SetMeta {
            spc: Some(spc),
            source: SetSource::Fewshot,
            ..data.meta.clone()
        },
    )
}
