//! Checkpoints: `model.safetensors` (named arrays, sorted by name) plus a
//! `meta.json` sibling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::classifier::{build_classifier, Classifier, ClassifierSpec};
use crate::error::{Error, Result};
use crate::guidance::Normalization;

pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch_id: String,
    pub nc: i64,
    pub input_shape: [i64; 3],
    pub seed: u64,
    pub train_hash: String,
    pub normalization: Normalization,
    #[serde(default)]
    pub accuracy: Option<f64>,
}

pub fn save_classifier(model: &Classifier, dir: &Path, seed: u64, train_hash: &str, accuracy: Option<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vars = model.var_store().variables();
    let mut named: Vec<(String, Tensor)> = vars.into_iter().collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let named: Vec<(String, Tensor)> = named
        .into_iter()
        .map(|(k, t)| (k, t.detach().contiguous()))
        .collect();
    Tensor::write_safetensors(&named, dir.join(WEIGHTS_FILE))?;
    let spec = model.spec();
    let meta = CheckpointMeta {
        arch_id: spec.arch_id.as_str().to_string(),
        nc: spec.num_classes,
        input_shape: spec.input_shape,
        seed,
        train_hash: train_hash.to_string(),
        normalization: model.normalization().clone(),
        accuracy,
    };
    let path = dir.join(META_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::Missing(format!("checkpoint meta {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_classifier(dir: &Path) -> Result<(Classifier, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let spec = ClassifierSpec::new(
        super::ArchId::parse(&meta.arch_id)?,
        meta.nc,
        meta.input_shape,
    );
    let mut model = build_classifier(&spec, meta.seed)?;
    let weights = dir.join(WEIGHTS_FILE);
    if !weights.is_file() {
        return Err(Error::Missing(format!("checkpoint weights {}", weights.display())));
    }
    model.var_store_mut().load(&weights)?;
    model.set_normalization(meta.normalization.clone())?;
    Ok((model, meta))
}
