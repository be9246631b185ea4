use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::inversion::kl_rows;

/// Argument order of the distillation KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `KL(student ‖ teacher)`
    StudentFirst,
    /// `KL(teacher ‖ student)`
    TeacherFirst,
}

/// Mean KL divergence between temperature-softened student and teacher
/// predictions. The teacher side is detached.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64, direction: KdDirection) -> Tensor {
    let s = student_logits / tau;
    let t = teacher_logits.detach() / tau;
    match direction {
        KdDirection::StudentFirst => kl_rows(&s, &t).mean(None),
        KdDirection::TeacherFirst => kl_rows(&t, &s).mean(None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// No guidance anywhere.
    Datafree,
    /// Guidance only as extra pool entries.
    PlusCs,
    /// Guidance in the pool and feature alignment during inversion.
    Star,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "datafree" => Ok(RunMode::Datafree),
            "plus_cs" => Ok(RunMode::PlusCs),
            "star" => Ok(RunMode::Star),
            other => Err(Error::Config(format!(
                "unknown mode `{other}`; expected datafree, plus_cs or star"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Datafree => "datafree",
            RunMode::PlusCs => "plus_cs",
            RunMode::Star => "star",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub epochs: usize,
    pub student_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine decay from `student_lr` to zero over all student steps.
    pub cosine: bool,
    pub batch_size: usize,
    pub temperature: f64,
    pub direction: KdDirection,
    pub include_guidance_in_pool: bool,
    /// Synthesis rounds per epoch; each round is followed by its share of
    /// student updates.
    pub rounds_per_epoch: usize,
    pub student_steps_per_epoch: usize,
    pub pool_capacity: Option<usize>,
    /// Most recent synthetic records used for the alignment diagnostic.
    pub align_samples: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            epochs: 40,
            student_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            cosine: true,
            batch_size: 128,
            temperature: 1.0,
            direction: KdDirection::StudentFirst,
            include_guidance_in_pool: true,
            rounds_per_epoch: 1,
            student_steps_per_epoch: 50,
            pool_capacity: None,
            align_samples: 512,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("kd.temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("kd.batch_size must be >= 1".into()));
        }
        if self.rounds_per_epoch < 1 {
            return Err(Error::Config("kd.rounds_per_epoch must be >= 1".into()));
        }
        if !(self.student_lr > 0.0) {
            return Err(Error::Config("kd.student_lr must be > 0".into()));
        }
        if self.pool_capacity == Some(0) {
            return Err(Error::Config("kd.pool_capacity must be >= 1".into()));
        }
        Ok(())
    }

    /// Student updates following round `round` of an epoch.
    pub fn steps_after_round(&self, round: usize) -> usize {
        let r = self.rounds_per_epoch;
        let base = self.student_steps_per_epoch / r;
        base + usize::from(round < self.student_steps_per_epoch % r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::scalar;
    use tch::Kind;

    #[test]
    fn identical_logits_give_zero() {
        let x = Tensor::from_slice(&[0.4f64, -1.0, 2.2, 0.0, 0.0, 1.0]).view([2, 3]);
        assert!(scalar(&kd_loss(&x, &x, 1.0, KdDirection::StudentFirst)).abs() < 1e-7);
    }

    #[test]
    fn hand_value_student_first() {
        let s = Tensor::from_slice(&[0.0f64, 0.0]).view([1, 2]);
        let t = Tensor::from_slice(&[0.0f64, 3f64.ln()]).view([1, 2]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((expected - 0.143841).abs() < 1e-6);
        assert!((scalar(&kd_loss(&s, &t, 1.0, KdDirection::StudentFirst)) - expected).abs() < 1e-6);
        let other = 0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln();
        assert!((scalar(&kd_loss(&s, &t, 1.0, KdDirection::TeacherFirst)) - other).abs() < 1e-6);
    }

    #[test]
    fn large_temperature_vanishes() {
        let s = Tensor::from_slice(&[3.0f64, -2.0, 0.5]).view([1, 3]);
        let t = Tensor::from_slice(&[-1.0f64, 4.0, 0.0]).view([1, 3]);
        let a = scalar(&kd_loss(&s, &t, 1.0, KdDirection::StudentFirst));
        let b = scalar(&kd_loss(&s, &t, 1e4, KdDirection::StudentFirst));
        assert!(b < 1e-6 && b < a);
    }

    #[test]
    fn gradient_reaches_student_only() {
        let s = Tensor::from_slice(&[0.1f64, 0.7, -0.3]).view([1, 3]).set_requires_grad(true);
        let t = Tensor::from_slice(&[1.0f64, 0.0, 0.2]).view([1, 3]).set_requires_grad(true);
        let loss = kd_loss(&s, &t, 2.0, KdDirection::StudentFirst);
        loss.backward();
        assert!(s.grad().abs().sum(Kind::Double).double_value(&[]) > 0.0);
        assert!(!t.grad().defined());
    }

    #[test]
    fn steps_split_across_rounds() {
        let c = KdConfig {
            rounds_per_epoch: 4,
            student_steps_per_epoch: 10,
            ..Default::default()
        };
        let v: Vec<usize> = (0..4).map(|r| c.steps_after_round(r)).collect();
        assert_eq!(v, vec![3, 3, 2, 2]);
    }

    #[test]
    fn config_checks() {
        assert!(KdConfig::default().validate().is_ok());
        let c = KdConfig { temperature: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(RunMode::parse("fast").is_err());
        assert_eq!(RunMode::parse("plus_cs").unwrap(), RunMode::PlusCs);
    }
}
