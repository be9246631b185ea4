//! Glue from a [`RunConfig`] to artifacts: dataset, teacher checkpoint,
//! guidance set and distillation runs with on-disk caching.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{GuidanceMode, RunConfig};
use crate::data::{load_dataset, Dataset, DatasetName};
use crate::distill::{read_metrics, run_distillation, DistillRun, MetricsRow, RunSummary, METRICS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::guidance::{condense_dm_with, load_condensed, sample_few_shot, save_condensed, LabeledImageSet};
use crate::models::{load_classifier, save_classifier, train_teacher, ArchId, CheckpointMeta, Classifier, ClassifierSpec};

pub const CONFIG_FILE: &str = "config.json";

/// Training subsets are drawn with a fixed seed so every run seed sees the
/// same data and the same teacher.
pub const DATA_SEED: u64 = 0;

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let name = DatasetName::parse(&cfg.dataset.name)?;
    load_dataset(name, &cfg.dataset.root, cfg.dataset.subset_size, DATA_SEED)
}

pub fn classifier_spec(arch: &str, data: &Dataset) -> Result<ClassifierSpec> {
    Ok(ClassifierSpec::new(
        ArchId::parse(arch)?,
        data.name.num_classes(),
        data.name.input_shape(),
    ))
}

/// Loads the teacher checkpoint. When it is missing and `train_if_missing`
/// is set, trains and saves it first.
pub fn teacher(cfg: &RunConfig, data: &Dataset, train_if_missing: bool) -> Result<(Classifier, CheckpointMeta)> {
    let dir = cfg.teacher_dir();
    if !dir.join(crate::models::META_FILE).exists() {
        if !train_if_missing {
            return Err(Error::Missing(format!(
                "teacher checkpoint {} (run `cskd train-teacher` first)",
                dir.display()
            )));
        }
        train_and_save_teacher(cfg, data)?;
    }
    let (mut model, meta) = load_classifier(&dir)?;
    model.freeze();
    Ok((model, meta))
}

pub fn train_and_save_teacher(cfg: &RunConfig, data: &Dataset) -> Result<(PathBuf, f64)> {
    let spec = classifier_spec(&cfg.teacher.arch, data)?;
    let (model, report) = train_teacher(&spec, &data.train, &data.test, &cfg.teacher.train)?;
    let dir = cfg.teacher_dir();
    save_classifier(
        &model,
        &dir,
        cfg.teacher.train.seed,
        &data.train.content_hash(),
        Some(report.test_accuracy),
    )?;
    let log = serde_json::json!({
        "epoch_losses": report.epoch_losses,
        "train_accuracy": report.train_accuracy,
        "test_accuracy": report.test_accuracy,
    });
    let p = dir.join("train_log.json");
    fs::write(&p, serde_json::to_vec_pretty(&log)?).map_err(|e| Error::io(&p, e))?;
    Ok((dir, report.test_accuracy))
}

/// The guidance set named by the config, if any.
pub fn guidance(cfg: &RunConfig, data: &Dataset) -> Result<Option<LabeledImageSet>> {
    match cfg.guidance.mode {
        GuidanceMode::None => Ok(None),
        GuidanceMode::Condensed => {
            let p = cfg
                .guidance
                .resolved_path()
                .ok_or_else(|| Error::Config("guidance.path is required".into()))?;
            if !p.join(crate::guidance::META_FILE_NAME).exists() {
                return Err(Error::Missing(format!("condensed set {}", p.display())));
            }
            let mut set = load_condensed(&p)?;
            set.meta.normalization = data.train.meta.normalization.clone();
            Ok(Some(set))
        }
        GuidanceMode::Fewshot => {
            let spc = cfg.guidance.spc.unwrap_or(0);
            Ok(Some(sample_few_shot(&data.train, spc, cfg.seed()?)?))
        }
    }
}

/// Produces (or reuses) a condensed set at `dir`.
pub fn condensed_set(
    cfg: &RunConfig,
    data: &Dataset,
    teacher: &Classifier,
    spc: usize,
    dir: &Path,
) -> Result<LabeledImageSet> {
    if dir.join(crate::guidance::META_FILE_NAME).exists() {
        return load_condensed(dir);
    }
    let out = condense_dm_with(&data.train, spc, teacher, &cfg.condense, cfg.seed()?)?;
    log::info!(
        "condensed {spc} spc: distance {:.4} -> {:.4} (step {})",
        out.initial_distance,
        out.best_distance,
        out.best_step
    );
    save_condensed(&out.set, dir)?;
    Ok(out.set)
}

#[derive(Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRow>,
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, cfg.pretty() + "\n").map_err(|e| Error::io(&p, e))
}

/// Reads a finished run directory.
pub fn read_run(dir: &Path) -> Result<RunResult> {
    let sp = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok(RunResult {
        dir: dir.to_path_buf(),
        summary: serde_json::from_str(&text)?,
        metrics: read_metrics(&dir.join(METRICS_FILE))?,
    })
}

/// Runs distillation for `cfg` into its hash-named directory. With
/// `reuse`, a directory holding a finished run with the same resolved
/// config is read back instead of recomputed.
pub fn distill(cfg: &RunConfig, data: &Dataset, teacher: &Classifier, reuse: bool) -> Result<RunResult> {
    cfg.validate()?;
    let dir = cfg.run_dir("distill");
    if reuse && dir.join(SUMMARY_FILE).exists() {
        let same = fs::read_to_string(dir.join(CONFIG_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .map(|v| v == cfg.to_tree())
            .unwrap_or(false);
        if same {
            return read_run(&dir);
        }
    }
    write_config(cfg, &dir)?;
    let guide = guidance(cfg, data)?;
    let student_spec = classifier_spec(&cfg.student.arch, data)?;
    let run = DistillRun::new(
        teacher,
        &student_spec,
        guide.as_ref(),
        &data.test,
        cfg.mode,
        &cfg.inversion,
        &cfg.kd,
        cfg.seed()?,
    )?;
    let out = run_distillation(run, Some(&dir))?;
    Ok(RunResult {
        dir,
        summary: out.summary,
        metrics: out.metrics,
    })
}
