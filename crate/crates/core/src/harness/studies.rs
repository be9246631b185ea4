//! Multi-run studies: condensed-set size scaling and the four-row ablation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::{bar_svg, errorbar_svg, Series};
use crate::config::{GuidanceMode, RunConfig};
use crate::data::Dataset;
use crate::distill::RunMode;
use crate::error::{Error, Result};
use crate::experiment::{self, read_run, CONFIG_FILE};
use crate::models::Classifier;

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub accs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Seeds whose run failed, with the error text.
    pub failures: Vec<(u64, String)>,
}

impl Cell {
    fn from_results(results: Vec<(u64, Result<f64>)>) -> Self {
        let mut accs = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in results {
            match r {
                Ok(a) => accs.push(a),
                Err(e) => failures.push((seed, e.to_string())),
            }
        }
        let (mean, std) = mean_std(&accs);
        Cell {
            accs,
            mean,
            std,
            failures,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn run_seeds(
    cfg: &RunConfig,
    data: &Dataset,
    teacher: &Classifier,
    seeds: &[u64],
    reuse: bool,
) -> Vec<(u64, Result<f64>)> {
    seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = Some(s);
            (s, experiment::distill(&c, data, teacher, reuse).map(|r| r.summary.best_acc))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub spc: usize,
    pub mode: String,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub spc_list: Vec<usize>,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub fn get(&self, spc: usize, mode: &str) -> Option<&Cell> {
        self.rows.iter().find(|r| r.spc == spc && r.mode == mode).map(|r| &r.cell)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("spc,mode,mean,std,n,failures\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                r.spc,
                r.mode,
                fmt(r.cell.mean),
                fmt(r.cell.std),
                r.cell.accs.len(),
                r.cell.failures.len()
            );
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let ticks: Vec<String> = self.spc_list.iter().map(|s| s.to_string()).collect();
        let series: Vec<Series> = ["plus_cs", "star"]
            .iter()
            .map(|m| Series {
                name: m.to_string(),
                points: self
                    .spc_list
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &spc)| self.get(spc, m).map(|c| (i as f64, c.mean, c.std)))
                    .filter(|p| p.1.is_finite())
                    .collect(),
            })
            .collect();
        errorbar_svg(&series, &ticks, "Accuracy vs guidance set size", "samples per class", "student accuracy")
    }
}

/// Runs `plus_cs` and `star` for every spc and seed. The base config's
/// guidance must be a condensed set whose path contains `{spc}`.
pub fn run_scaling_study(
    base: &RunConfig,
    data: &Dataset,
    teacher: &Classifier,
    spc_list: &[usize],
    seeds: &[u64],
    reuse: bool,
    out_dir: Option<&Path>,
) -> Result<ScalingReport> {
    if base.guidance.mode != GuidanceMode::Condensed {
        return Err(Error::Config("scaling study needs guidance.mode=condensed".into()));
    }
    let mut rows = Vec::new();
    for &spc in spc_list {
        let mut cfg = base.clone();
        cfg.guidance.spc = Some(spc);
        let p = cfg.guidance.resolved_path().unwrap_or_default();
        if !p.join(crate::guidance::META_FILE_NAME).exists() {
            return Err(Error::Missing(format!("condensed set for spc={spc} at {}", p.display())));
        }
        for mode in [RunMode::PlusCs, RunMode::Star] {
            cfg.mode = mode;
            rows.push(ScalingRow {
                spc,
                mode: mode.as_str().into(),
                cell: Cell::from_results(run_seeds(&cfg, data, teacher, seeds, reuse)),
            });
        }
    }
    let report = ScalingReport {
        spc_list: spc_list.to_vec(),
        rows,
    };
    if let Some(dir) = out_dir {
        write_text(&dir.join("scaling.csv"), &report.to_csv())?;
        write_text(&dir.join("scaling.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("scaling.svg"), &report.to_svg())?;
    }
    Ok(report)
}

pub const ABLATION_LABELS: [&str; 4] = ["base", "plus_cs", "cs_guided", "class_specific"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cell: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, label: &str) -> Option<&Cell> {
        self.rows.iter().find(|r| r.label == label).map(|r| &r.cell)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,mean,std,n,failures\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{}\n",
                r.label,
                fmt(r.cell.mean),
                fmt(r.cell.std),
                r.cell.accs.len(),
                r.cell.failures.len()
            );
        }
        s
    }

    pub fn to_svg(&self) -> String {
        let rows: Vec<(String, f64, f64)> = self
            .rows
            .iter()
            .map(|r| (r.label.clone(), r.cell.mean, if r.cell.std.is_finite() { r.cell.std } else { 0.0 }))
            .filter(|r| r.1.is_finite())
            .collect();
        bar_svg(&rows, "Ablation", "student accuracy")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("ablation.csv"), &self.to_csv())?;
        write_text(&dir.join("ablation.json"), &serde_json::to_string_pretty(self)?)?;
        write_text(&dir.join("ablation.svg"), &self.to_svg())
    }
}

/// The four ablation configurations derived from `base`.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    ABLATION_LABELS
        .iter()
        .map(|&label| {
            let mut c = base.clone();
            match label {
                "base" => c.mode = RunMode::Datafree,
                "plus_cs" => c.mode = RunMode::PlusCs,
                "cs_guided" => {
                    c.mode = RunMode::Star;
                    c.inversion.conditional = false;
                }
                _ => {
                    c.mode = RunMode::Star;
                    c.inversion.conditional = true;
                }
            }
            (label, c)
        })
        .collect()
}

/// Label of a run configuration within the ablation, if it is one.
pub fn ablation_label(cfg: &RunConfig) -> &'static str {
    match (cfg.mode, cfg.inversion.conditional) {
        (RunMode::Datafree, _) => "base",
        (RunMode::PlusCs, _) => "plus_cs",
        (RunMode::Star, false) => "cs_guided",
        (RunMode::Star, true) => "class_specific",
    }
}

/// Runs the four ablation rows over `seeds`. Failed runs are recorded in
/// their cell instead of aborting the study.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    teacher: &Classifier,
    seeds: &[u64],
    reuse: bool,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let rows = ablation_configs(base)
        .into_iter()
        .map(|(label, cfg)| AblationRow {
            label: label.into(),
            cell: Cell::from_results(run_seeds(&cfg, data, teacher, seeds, reuse)),
        })
        .collect();
    let report = AblationReport { rows };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Assembles an ablation report from finished run directories.
pub fn ablation_from_runs(dirs: &[PathBuf]) -> Result<AblationReport> {
    let mut buckets: Vec<Vec<(u64, Result<f64>)>> = (0..4).map(|_| Vec::new()).collect();
    for d in dirs {
        let cp = d.join(CONFIG_FILE);
        let text = fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
        let cfg = RunConfig::from_tree(serde_json::from_str(&text)?)?;
        let label = ablation_label(&cfg);
        let k = ABLATION_LABELS.iter().position(|&l| l == label).unwrap();
        let seed = cfg.seed.unwrap_or(0);
        buckets[k].push((seed, read_run(d).map(|r| r.summary.best_acc)));
    }
    Ok(AblationReport {
        rows: ABLATION_LABELS
            .iter()
            .zip(buckets)
            .map(|(l, b)| AblationRow {
                label: l.to_string(),
                cell: Cell::from_results(b),
            })
            .collect(),
    })
}
