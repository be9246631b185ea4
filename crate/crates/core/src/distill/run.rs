//! The distillation epoch loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tch::{nn, nn::OptimizerConfig, Tensor};

use super::kd::{kd_loss, KdConfig, RunMode};
use super::pool::SyntheticPool;
use crate::error::{Error, Result};
use crate::guidance::{save_condensed, LabeledImageSet, SetMeta, SetSource};
use crate::harness::{class_alignment_metric, evaluate_accuracy};
use crate::inversion::{invert_step, maybe_reset, scalar, InversionConfig, InversionState};
use crate::models::{
    build_classifier, save_classifier, Classifier, ClassifierSpec, DiscriminatorSpec, GeneratorSpec,
};
use crate::rng;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const STUDENT_DIR: &str = "student";
pub const SYNTHETIC_DIR: &str = "synthetic";

/// One line of the metrics stream. `wall_ms` is left empty so that streams
/// from identical runs are byte-identical; timings go to a sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub mode: String,
    pub student_acc: f64,
    pub loss_g: f64,
    pub loss_d: Option<f64>,
    pub loss_kd: f64,
    pub align_dist: Option<f64>,
    pub seed: u64,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_acc: f64,
    pub best_epoch: usize,
    pub final_acc: f64,
    pub final_align_dist: Option<f64>,
}

/// Everything one distillation run mutates.
pub struct DistillRun<'a> {
    pub teacher: &'a Classifier,
    pub student: Classifier,
    pub inversion: InversionState,
    pub pool: SyntheticPool,
    pub mode: RunMode,
    pub kd: KdConfig,
    guidance: Option<&'a LabeledImageSet>,
    test: &'a LabeledImageSet,
    opt: nn::Optimizer,
    seed: u64,
    step: usize,
}

impl<'a> DistillRun<'a> {
    /// `guidance` feeds the pool (`plus_cs`, `star`) and the alignment term
    /// (`star`); in every mode it is also the reference for the alignment
    /// diagnostic.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        teacher: &'a Classifier,
        student_spec: &ClassifierSpec,
        guidance: Option<&'a LabeledImageSet>,
        test: &'a LabeledImageSet,
        mode: RunMode,
        inv: &InversionConfig,
        kd: &KdConfig,
        seed: u64,
    ) -> Result<Self> {
        inv.validate()?;
        kd.validate()?;
        if teacher.var_store().trainable_variables().iter().any(|t| t.requires_grad()) {
            return Err(Error::Config("teacher must be frozen".into()));
        }
        let nc = teacher.num_classes();
        if student_spec.num_classes != nc || student_spec.input_shape != teacher.spec().input_shape {
            return Err(Error::Config("student and teacher disagree on classes or input shape".into()));
        }
        if let Some(g) = guidance {
            if g.nc() != nc || g.shape() != teacher.spec().input_shape {
                return Err(Error::Config(format!(
                    "guidance set ({} classes, shape {:?}) does not match the teacher",
                    g.nc(),
                    g.shape()
                )));
            }
            if g.is_empty() {
                return Err(Error::EmptySet);
            }
        }
        let mut student = build_classifier(student_spec, rng::derive(seed, "student", 0))?;
        student.set_normalization(teacher.normalization().clone())?;

        let gen_spec = GeneratorSpec::for_images(inv.nz, teacher.spec().input_shape, inv.gen_width);
        let aligned = mode == RunMode::Star && guidance.is_some() && inv.weights.fa > 0.0;
        let disc_spec = aligned.then(|| DiscriminatorSpec::new(teacher.feat_dim(), nc));
        let inversion = InversionState::new(&gen_spec, disc_spec.as_ref(), inv, seed)?;

        let mut pool = SyntheticPool::new(kd.pool_capacity);
        if mode != RunMode::Datafree && kd.include_guidance_in_pool {
            if let Some(g) = guidance {
                pool.add_guidance(g);
            }
        }
        let opt = nn::sgd(kd.momentum, 0.0, kd.weight_decay, false).build(student.var_store(), kd.student_lr)?;
        Ok(DistillRun {
            teacher,
            student,
            inversion,
            pool,
            mode,
            kd: kd.clone(),
            guidance,
            test,
            opt,
            seed,
            step: 0,
        })
    }

    fn total_steps(&self) -> usize {
        self.kd.epochs * self.kd.student_steps_per_epoch
    }

    fn lr_at(&self, step: usize) -> f64 {
        if !self.kd.cosine {
            return self.kd.student_lr;
        }
        let t = step as f64 / self.total_steps().max(1) as f64;
        0.5 * self.kd.student_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn student_update(&mut self) -> Result<f64> {
        let b = self.pool.sample(self.kd.batch_size, rng::derive(self.seed, "pool", self.step as u64))?;
        let t_logits = tch::no_grad(|| self.teacher.logits(&b.images))?;
        let s_logits = self.student.logits_t(&b.images, true)?;
        let loss = kd_loss(&s_logits, &t_logits, self.kd.temperature, self.kd.direction);
        let v = scalar(&loss);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("kd loss {v} at student step {}", self.step)));
        }
        self.opt.set_lr(self.lr_at(self.step));
        self.opt.backward_step(&loss);
        self.step += 1;
        Ok(v)
    }

    /// The most recent synthetic records (up to `kd.align_samples`).
    pub fn recent_synthetic_set(&self) -> Result<Option<LabeledImageSet>> {
        let Some((images, labels)) = self.pool.recent_synthetic(self.kd.align_samples) else {
            return Ok(None);
        };
        let t = self.teacher.spec();
        let meta = SetMeta {
            dataset_name: self.test.meta.dataset_name.clone(),
            nc: t.num_classes,
            spc: None,
            normalization: self.teacher.normalization().clone(),
            source: SetSource::Synthetic,
        };
        Ok(Some(LabeledImageSet::new(images, labels, meta)?))
    }

    /// Alignment diagnostic between recent synthetic records and the
    /// guidance set, on teacher features. Empty when undefined.
    pub fn align_dist(&self) -> Result<Option<f64>> {
        let Some(guide) = self.guidance else { return Ok(None) };
        let Some(synth) = self.recent_synthetic_set()? else { return Ok(None) };
        match class_alignment_metric(self.teacher, &synth, guide) {
            Ok(d) => Ok(Some(d)),
            Err(Error::Coverage(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// One epoch: synthesis round(s), pool growth, student updates on pool
/// samples, then the periodic generator/discriminator reset.
pub fn distill_epoch(run: &mut DistillRun, epoch: usize) -> Result<MetricsRow> {
    let guidance = if run.mode == RunMode::Star { run.guidance } else { None };
    let mut kd_sum = 0.0;
    let mut kd_n = 0usize;
    let mut loss_g = 0.0;
    let mut loss_d = None;
    for round in 0..run.kd.rounds_per_epoch {
        let index = (epoch * run.kd.rounds_per_epoch + round) as u64;
        let out = invert_step(
            &mut run.inversion,
            run.teacher,
            &mut run.student,
            guidance,
            rng::derive(run.seed, "invert", index),
        )?;
        loss_g = out.losses.loss_g;
        loss_d = out.losses.loss_d;
        run.pool.add_synthetic(&out.batch);
        for _ in 0..run.kd.steps_after_round(round) {
            kd_sum += run.student_update()?;
            kd_n += 1;
        }
    }
    maybe_reset(&mut run.inversion, epoch + 1)?;
    Ok(MetricsRow {
        epoch,
        mode: run.mode.as_str().to_string(),
        student_acc: evaluate_accuracy(&run.student, run.test)?,
        loss_g,
        loss_d,
        loss_kd: if kd_n > 0 { kd_sum / kd_n as f64 } else { 0.0 },
        align_dist: run.align_dist()?,
        seed: run.seed,
        wall_ms: None,
    })
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub metrics: Vec<MetricsRow>,
    pub summary: RunSummary,
    /// Student from the best-accuracy epoch.
    pub best_student: Classifier,
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Runs all epochs. With `out_dir`, writes the metrics stream, a timing
/// sidecar, the best student checkpoint and a summary.
pub fn run_distillation(mut run: DistillRun, out_dir: Option<&Path>) -> Result<DistillOutcome> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in [METRICS_FILE, TIMING_FILE] {
            let p = dir.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let spec = run.student.spec().clone();
    let mut best_student = build_classifier(&spec, 0)?;
    best_student.set_normalization(run.student.normalization().clone())?;
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut metrics = Vec::with_capacity(run.kd.epochs);
    for epoch in 0..run.kd.epochs {
        let start = Instant::now();
        let row = distill_epoch(&mut run, epoch)?;
        let ms = start.elapsed().as_millis() as u64;
        log::info!(
            "[{}] epoch {epoch}: acc {:.4} kd {:.4} g {:.4} d {:?} align {:?} ({ms} ms)",
            row.mode,
            row.student_acc,
            row.loss_kd,
            row.loss_g,
            row.loss_d,
            row.align_dist
        );
        if row.student_acc > best.0 {
            best = (row.student_acc, epoch);
            best_student.copy_from(&run.student)?;
        }
        if let Some(dir) = out_dir {
            append_line(&dir.join(METRICS_FILE), &row)?;
            append_line(&dir.join(TIMING_FILE), &serde_json::json!({"epoch": epoch, "wall_ms": ms}))?;
        }
        metrics.push(row);
    }
    let last = metrics.last();
    let summary = RunSummary {
        mode: run.mode.as_str().to_string(),
        seed: run.seed,
        epochs: run.kd.epochs,
        best_acc: if best.0.is_finite() { best.0 } else { 0.0 },
        best_epoch: best.1,
        final_acc: last.map_or(0.0, |r| r.student_acc),
        final_align_dist: last.and_then(|r| r.align_dist),
    };
    if let Some(dir) = out_dir {
        save_classifier(&best_student, &dir.join(STUDENT_DIR), run.seed, "", Some(summary.best_acc))?;
        if let Some(set) = run.recent_synthetic_set()? {
            save_condensed(&set, &dir.join(SYNTHETIC_DIR))?;
        }
        let mut json = serde_json::to_vec_pretty(&summary)?;
        json.push(b'\n');
        let p = dir.join(SUMMARY_FILE);
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(DistillOutcome {
        metrics,
        summary,
        best_student,
    })
}

/// Reads a metrics stream back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Convenience for tests and tools: teacher logits of a pool batch.
pub fn teacher_labels(teacher: &Classifier, images: &Tensor) -> Result<Tensor> {
    tch::no_grad(|| teacher.logits(images))
}
