//! Run configuration: a JSON tree with defaults, file values and
//! `key.path=value` overrides, plus the hash that names output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::distill::{KdConfig, RunMode};
use crate::error::{Error, Result};
use crate::guidance::CondenseOptions;
use crate::inversion::InversionConfig;
use crate::models::TrainHp;

pub const OUT_ENV: &str = "CSKD_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub name: String,
    pub root: PathBuf,
    pub subset_size: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "mnist".into(),
            root: PathBuf::from("data/mnist"),
            subset_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub arch: String,
    /// Checkpoint directory; derived from the config hash when absent.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainHp,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            arch: "lenet5".into(),
            checkpoint: None,
            train: TrainHp::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentConfig {
    pub arch: String,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            arch: "lenet5_half".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    None,
    Condensed,
    Fewshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Condensed-set directory; `{spc}` is replaced by `spc` when present.
    pub path: Option<String>,
    pub spc: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            path: None,
            spc: None,
        }
    }
}

impl GuidanceConfig {
    pub fn resolved_path(&self) -> Option<PathBuf> {
        self.path.as_ref().map(|p| match self.spc {
            Some(spc) => PathBuf::from(p.replace("{spc}", &spc.to_string())),
            None => PathBuf::from(p),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct HarnessConfig {
    /// Output root; falls back to `$CSKD_OUT`, then `runs`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub guidance: GuidanceConfig,
    pub condense: CondenseOptions,
    pub inversion: InversionConfig,
    pub kd: KdConfig,
    pub mode: RunMode,
    pub harness: HarnessConfig,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            guidance: GuidanceConfig::default(),
            condense: CondenseOptions::default(),
            inversion: InversionConfig::default(),
            kd: KdConfig::default(),
            mode: RunMode::Datafree,
            harness: HarnessConfig::default(),
            seed: None,
        }
    }
}

/// Recursively merges `over` into `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::load(p, e.to_string()))?;
            if !v.is_object() {
                return Err(Error::load(p, "config must be a JSON object"));
            }
            merge(&mut tree, v);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_tree(tree)
    }

    pub fn from_tree(tree: Value) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("`seed` is required".into()))
    }

    /// Mode-specific checks on top of the per-section ones.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        crate::data::DatasetName::parse(&self.dataset.name)?;
        crate::models::ArchId::parse(&self.teacher.arch)?;
        crate::models::ArchId::parse(&self.student.arch)?;
        self.inversion.validate()?;
        self.kd.validate()?;
        match self.guidance.mode {
            GuidanceMode::Condensed if self.guidance.path.is_none() => {
                return Err(Error::Config("guidance.mode=condensed needs guidance.path".into()))
            }
            GuidanceMode::Fewshot if self.guidance.spc.unwrap_or(0) == 0 => {
                return Err(Error::Config("guidance.mode=fewshot needs guidance.spc >= 1".into()))
            }
            GuidanceMode::None if self.mode != RunMode::Datafree => {
                if self.mode == RunMode::PlusCs {
                    return Err(Error::Config("mode plus_cs needs a guidance set".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_tree(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_tree()).expect("config serializes")
    }

    /// Hash of the resolved tree, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut tree = self.to_tree();
        if let Some(h) = tree.get_mut("harness").and_then(Value::as_object_mut) {
            h.remove("out_dir");
        }
        short_hash(&tree)
    }

    pub fn out_root(&self) -> PathBuf {
        self.harness
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// `<out_root>/<kind>-<hash>`
    pub fn run_dir(&self, kind: &str) -> PathBuf {
        self.out_root().join(format!("{kind}-{}", self.hash()))
    }

    /// Hash over the settings that determine the teacher only.
    pub fn teacher_hash(&self) -> String {
        short_hash(&serde_json::json!({
            "dataset": self.dataset,
            "arch": self.teacher.arch,
            "train": self.teacher.train,
        }))
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.teacher
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_root().join(format!("teacher-{}", self.teacher_hash())))
    }
}

/// First 16 hex digits of SHA-256 over compact JSON (keys sorted).
pub fn short_hash(v: &Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Vec<String> {
        vec!["seed=1".into()]
    }

    #[test]
    fn precedence_is_cli_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"kd":{"epochs":7,"batch_size":32},"seed":3}"#).unwrap();
        let c = RunConfig::resolve(Some(&f), &["kd.epochs=9".into()]).unwrap();
        assert_eq!(c.kd.epochs, 9);
        assert_eq!(c.kd.batch_size, 32);
        assert_eq!(c.kd.temperature, 1.0);
        assert_eq!(c.seed, Some(3));
    }

    #[test]
    fn override_parsing() {
        let c = RunConfig::resolve(
            None,
            &[
                "seed=4".into(),
                "mode=star".into(),
                "inversion.diffaug=[\"cutout\"]".into(),
                "dataset.name=cifar10".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.mode, RunMode::Star);
        assert_eq!(c.dataset.name, "cifar10");
        assert_eq!(c.inversion.diffaug.len(), 1);
        assert!(RunConfig::resolve(None, &["seed".into()]).is_err());
        assert!(RunConfig::resolve(None, &["kd.epochs=\"x\"".into()]).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("seed"));
        RunConfig::resolve(None, &base()).unwrap().validate().unwrap();
    }

    #[test]
    fn mode_specific_keys() {
        let c = RunConfig::resolve(None, &["seed=1".into(), "guidance.mode=condensed".into()]).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::resolve(None, &["seed=1".into(), "mode=plus_cs".into()]).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::resolve(None, &["seed=1".into(), "guidance.mode=fewshot".into(), "guidance.spc=5".into()])
            .unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = RunConfig::resolve(None, &base()).unwrap();
        let mut b = a.clone();
        b.harness.out_dir = Some("/tmp/elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.kd.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        // round trip through the printed tree keeps the hash
        let c = RunConfig::from_tree(serde_json::from_str(&a.pretty()).unwrap()).unwrap();
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn spc_placeholder() {
        let g = GuidanceConfig {
            mode: GuidanceMode::Condensed,
            path: Some("sets/dm-{spc}".into()),
            spc: Some(10),
        };
        assert_eq!(g.resolved_path().unwrap(), PathBuf::from("sets/dm-10"));
    }
}
