//! `cskd`: teacher training, condensation, guided distillation and reports.

mod fetch;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cskd::config::{GuidanceMode, RunConfig};
use cskd::data::DatasetName;
use cskd::distill::RunMode;
use cskd::experiment;
use cskd::guidance::{load_condensed, sample_few_shot, save_condensed, condense_dm_with};
use cskd::harness::{
    ablation_from_runs, feature_projection_2d, run_ablation, run_scaling_study, scatter_svg, write_projection_csv,
    ProjectionMethod,
};
use cskd::models::load_classifier;

#[derive(Parser)]
#[command(name = "cskd", version, about = "Condensed-sample-guided data-free knowledge distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set kd.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (overrides harness.out_dir and $CSKD_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Validate the config and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the teacher named by the config and write its checkpoint.
    TrainTeacher,
    /// Build a guidance set in the condensed-set format.
    Condense(CondenseArgs),
    /// Distill a student from the teacher.
    Distill(DistillArgs),
    /// Tables, plots and projections.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Download a dataset into the configured root (needs network).
    Fetch {
        dataset: String,
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Dm,
    Fewshot,
}

#[derive(Args)]
struct CondenseArgs {
    #[arg(long)]
    spc: usize,
    #[arg(long, value_enum, default_value = "dm")]
    method: Method,
    /// Output directory (default: <out>/condensed-<method>-<spc>-<hash>).
    #[arg(long = "to")]
    to: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, value_parser = ["datafree", "plus_cs", "star"])]
    mode: Option<String>,
    /// `condensed:PATH`, `fewshot:SPC` or `none`.
    #[arg(long)]
    guidance: Option<String>,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Ablation table from finished runs, or run it over `--seeds`.
    Ablation {
        runs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Accuracy over guidance-set sizes (guidance.path may contain `{spc}`).
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
        spc: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// 2-D projection of penultimate features of one or more sets.
    Tsne {
        checkpoint: PathBuf,
        #[arg(required = true)]
        sets: Vec<PathBuf>,
        #[arg(long, default_value = "tsne")]
        method: String,
        /// Records per set (first N).
        #[arg(long, default_value_t = 500)]
        limit: usize,
    },
}

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &common.out {
        overrides.push(format!("harness.out_dir={}", serde_json::to_string(o)?));
    }
    overrides.extend_from_slice(extra);
    Ok(RunConfig::resolve(common.config.as_deref(), &overrides)?)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(experiment::CONFIG_FILE), cfg.pretty() + "\n")?;
    Ok(())
}

fn guidance_overrides(spec: &str) -> Result<Vec<String>> {
    let json = |s: &str| serde_json::to_string(s).unwrap();
    Ok(match spec.split_once(':') {
        None if spec == "none" => vec!["guidance.mode=\"none\"".into()],
        Some(("condensed", p)) => vec!["guidance.mode=\"condensed\"".into(), format!("guidance.path={}", json(p))],
        Some(("fewshot", n)) => {
            let spc: usize = n.parse().with_context(|| format!("bad spc `{n}`"))?;
            vec!["guidance.mode=\"fewshot\"".into(), format!("guidance.spc={spc}")]
        }
        _ => bail!("--guidance expects condensed:PATH, fewshot:SPC or none"),
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut extra = Vec::new();
    if let Cmd::Distill(a) = &cli.cmd {
        if let Some(m) = &a.mode {
            extra.push(format!("mode=\"{m}\""));
        }
        if let Some(g) = &a.guidance {
            extra.extend(guidance_overrides(g)?);
        }
    }
    let cfg = resolve(&cli.common, &extra)?;
    if cli.common.print_config {
        println!("{}", cfg.pretty());
        println!("# hash {}", cfg.hash());
        return Ok(());
    }
    if !matches!(cli.cmd, Cmd::Fetch { .. } | Cmd::Report(ReportCmd::Tsne { .. } | ReportCmd::Ablation { .. })) {
        cfg.validate()?;
    }
    if cli.common.dry_run {
        println!("config ok (hash {})", cfg.hash());
        return Ok(());
    }

    match cli.cmd {
        Cmd::TrainTeacher => {
            let data = experiment::load_data(&cfg)?;
            let (dir, acc) = experiment::train_and_save_teacher(&cfg, &data)?;
            write_resolved(&cfg, &dir)?;
            println!("teacher test accuracy {acc:.4}; checkpoint {}", dir.display());
        }
        Cmd::Condense(a) => {
            if a.spc == 0 {
                bail!("--spc must be >= 1");
            }
            let data = experiment::load_data(&cfg)?;
            let name = match a.method {
                Method::Dm => "dm",
                Method::Fewshot => "fewshot",
            };
            let dir = a
                .to
                .unwrap_or_else(|| cfg.out_root().join(format!("condensed-{name}-{}-{}", a.spc, cfg.hash())));
            let set = match a.method {
                Method::Fewshot => sample_few_shot(&data.train, a.spc, cfg.seed()?)?,
                Method::Dm => {
                    let (teacher, _) = experiment::teacher(&cfg, &data, false)?;
                    let out = condense_dm_with(&data.train, a.spc, &teacher, &cfg.condense, cfg.seed()?)?;
                    log::info!("class-mean distance {:.4} -> {:.4}", out.initial_distance, out.best_distance);
                    out.set
                }
            };
            save_condensed(&set, &dir)?;
            println!("wrote {} records ({} per class) to {}", set.len(), a.spc, dir.display());
        }
        Cmd::Distill(_) => {
            if cfg.mode == RunMode::Datafree && cfg.guidance.mode != GuidanceMode::None {
                log::warn!("mode datafree: guidance is ignored for training and only used as the alignment reference");
                eprintln!("warning: mode datafree ignores the guidance set for training");
            }
            let data = experiment::load_data(&cfg)?;
            let (teacher, _) = experiment::teacher(&cfg, &data, false)?;
            let r = experiment::distill(&cfg, &data, &teacher, false)?;
            println!(
                "{} seed {}: best acc {:.4} (epoch {}), final acc {:.4}; run dir {}",
                r.summary.mode,
                r.summary.seed,
                r.summary.best_acc,
                r.summary.best_epoch,
                r.summary.final_acc,
                r.dir.display()
            );
        }
        Cmd::Report(ReportCmd::Ablation { runs, seeds }) => {
            let out = cfg.out_root().join("report-ablation");
            let report = if !runs.is_empty() {
                for r in &runs {
                    if !r.is_dir() {
                        bail!("run directory {} does not exist", r.display());
                    }
                }
                let rep = ablation_from_runs(&runs)?;
                rep.write(&out)?;
                rep
            } else if !seeds.is_empty() {
                cfg.validate()?;
                let data = experiment::load_data(&cfg)?;
                let (teacher, _) = experiment::teacher(&cfg, &data, false)?;
                run_ablation(&cfg, &data, &teacher, &seeds, true, Some(&out))?
            } else {
                bail!("give run directories or --seeds");
            };
            print!("{}", report.to_csv());
            eprintln!("report written to {}", out.display());
        }
        Cmd::Report(ReportCmd::Scaling { spc, seeds }) => {
            let data = experiment::load_data(&cfg)?;
            let (teacher, _) = experiment::teacher(&cfg, &data, false)?;
            let out = cfg.out_root().join("report-scaling");
            let report = run_scaling_study(&cfg, &data, &teacher, &spc, &seeds, true, Some(&out))?;
            print!("{}", report.to_csv());
            eprintln!("report written to {}", out.display());
        }
        Cmd::Report(ReportCmd::Tsne {
            checkpoint,
            sets,
            method,
            limit,
        }) => {
            let method = ProjectionMethod::parse(&method)?;
            let (model, _) = load_classifier(&checkpoint)?;
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            let mut sources = Vec::new();
            for p in &sets {
                let set = load_condensed(p)?;
                let n = set.len().min(limit);
                let idx: Vec<usize> = (0..n).collect();
                let sub = set.select(&idx, cskd::guidance::SetMeta { spc: None, ..set.meta.clone() })?;
                feats.push(model.predict_features(sub.images(), 512)?);
                labels.extend_from_slice(sub.labels());
                let tag = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                sources.extend(std::iter::repeat(tag).take(n));
            }
            let f = tch::Tensor::cat(&feats, 0);
            let proj = feature_projection_2d(&f, &labels, method, cfg.seed.unwrap_or(0))?;
            let out = cfg.out_root().join("report-projection");
            fs::create_dir_all(&out)?;
            write_projection_csv(&out.join("projection.csv"), &proj, &sources)?;
            fs::write(out.join("projection.svg"), scatter_svg(&proj.points, &proj.labels, "Penultimate features"))?;
            println!("wrote {} points to {}", proj.points.len(), out.display());
        }
        Cmd::Fetch { dataset, root } => {
            let name = DatasetName::parse(&dataset)?;
            let root = root.unwrap_or_else(|| cfg.dataset.root.clone());
            fetch::fetch(name, &root)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
