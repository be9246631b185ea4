//! Inversion, alignment and discriminator losses. All functions are generic
//! over the floating kind of their inputs.

use tch::{Kind, Tensor};

use super::config::InversionConfig;
use crate::error::{Error, Result};
use crate::models::{BNStatistics, BatchMoments, Discriminator};
use crate::rng::SeedRng;

/// Mean cross-entropy of the teacher's softmax against the pseudo-labels.
/// Minimizing it maximizes teacher confidence on the pseudo-classes.
pub fn confidence_loss(teacher_logits: &Tensor, y_ps: &Tensor) -> Tensor {
    let logp = teacher_logits.log_softmax(-1, None);
    -logp.gather(1, &y_ps.unsqueeze(1), false).mean(None)
}

/// Row-wise `KL(softmax(p_logits) || softmax(q_logits))`.
pub fn kl_rows(p_logits: &Tensor, q_logits: &Tensor) -> Tensor {
    let logp = p_logits.log_softmax(-1, None);
    let logq = q_logits.log_softmax(-1, None);
    (logp.exp() * (&logp - logq)).sum_dim_intlist(-1, false, None)
}

/// `−mean KL(softmax(teacher) ‖ softmax(student))`; never positive.
pub fn adversarial_divergence_loss(teacher_logits: &Tensor, student_logits: &Tensor) -> Tensor {
    -kl_rows(teacher_logits, student_logits).mean(None)
}

/// `Σ_layers ‖μ_batch − μ_run‖² + ‖σ²_batch − σ²_run‖²`.
pub fn bn_alignment_loss(stats: &BNStatistics, batch: &[BatchMoments]) -> Result<Tensor> {
    if stats.layers.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} running-stat layers but {} batch-stat layers",
            stats.layers.len(),
            batch.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (i, (run, cur)) in stats.layers.iter().zip(batch).enumerate() {
        if run.mean.size() != cur.mean.size() || run.var.size() != cur.var.size() {
            return Err(Error::Dimension(format!(
                "layer {i}: running stats {:?} vs batch stats {:?} (layer order mismatch?)",
                run.mean.size(),
                cur.mean.size()
            )));
        }
        let kind = cur.mean.kind();
        let dm = &cur.mean - run.mean.to_kind(kind);
        let dv = &cur.var - run.var.to_kind(kind);
        let term = dm.square().sum(kind) + dv.square().sum(kind);
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    total.ok_or(Error::NoBatchNorm)
}

/// Discriminator input rows: features concatenated with the one-hot class,
/// or with zeros when the alignment is generic.
pub fn disc_input(features: &Tensor, labels: &[i64], nc: i64, conditional: bool) -> Tensor {
    let kind = features.kind();
    let n = features.size()[0];
    let cls = if conditional {
        Tensor::from_slice(labels).one_hot(nc).to_kind(kind)
    } else {
        Tensor::zeros([n, nc], (kind, features.device()))
    };
    Tensor::cat(&[features.shallow_clone(), cls], 1)
}

fn check_finite(x: &Tensor, side: &str) -> Result<()> {
    if x.numel() == 0 {
        return Ok(());
    }
    let bad = x.isfinite().logical_not().any_dim(1, false);
    if bad.any().int64_value(&[]) != 0 {
        let idx = bad.nonzero().int64_value(&[0, 0]);
        return Err(Error::Numerical(format!("non-finite {side} feature at batch index {idx}")));
    }
    Ok(())
}

/// Binary cross-entropy of the discriminator with equal weight on both
/// sides: `½·(mean_real −ln σ(D) + mean_fake −ln(1 − σ(D)))`. A side with
/// no records drops out; with both empty the loss is zero.
pub fn discriminator_loss(
    disc: &Discriminator,
    real_input: &Tensor,
    fake_input: &Tensor,
    mut dropout: Option<&mut SeedRng>,
) -> Result<Tensor> {
    check_finite(real_input, "real")?;
    check_finite(fake_input, "fake")?;
    let mut sides = Vec::new();
    if real_input.size()[0] > 0 {
        let s = disc.forward(real_input, dropout.as_deref_mut())?;
        sides.push((-s).softplus().mean(None));
    }
    if fake_input.size()[0] > 0 {
        let s = disc.forward(fake_input, dropout.as_deref_mut())?;
        sides.push(s.softplus().mean(None));
    }
    Ok(match sides.len() {
        0 => Tensor::zeros([], (real_input.kind(), real_input.device())),
        1 => sides.pop().unwrap(),
        _ => (&sides[0] + &sides[1]) * 0.5,
    })
}

/// Non-saturating generator alignment loss `−mean ln σ(D(φ(x̂), y_ps))`.
/// The caller freezes the discriminator.
pub fn feature_alignment_loss(
    disc: &Discriminator,
    synth_input: &Tensor,
    dropout: Option<&mut SeedRng>,
) -> Result<Tensor> {
    let s = disc.forward(synth_input, dropout)?;
    Ok((-s).softplus().mean(None))
}

/// Components of the generator objective. Absent terms contribute nothing.
#[derive(Debug)]
pub struct LossParts {
    pub conf: Tensor,
    pub adv: Tensor,
    pub bn: Option<Tensor>,
    pub fa: Option<Tensor>,
}

/// `w_conf·conf + w_adv·adv + w_bn·bn + w_fa·fa`.
pub fn generator_loss(cfg: &InversionConfig, parts: &LossParts) -> Tensor {
    let w = &cfg.weights;
    let mut loss = &parts.conf * w.conf + &parts.adv * w.adv;
    if let Some(bn) = &parts.bn {
        loss = loss + bn * w.bn;
    }
    if let Some(fa) = &parts.fa {
        loss = loss + fa * w.fa;
    }
    loss
}

pub fn scalar(x: &Tensor) -> f64 {
    x.to_kind(Kind::Double).double_value(&[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_discriminator, DiscriminatorSpec};

    fn t2(v: &[f64], r: i64, c: i64) -> Tensor {
        Tensor::from_slice(v).view([r, c])
    }

    #[test]
    fn confidence_uniform_is_ln_nc() {
        let logits = Tensor::zeros([3, 10], (Kind::Double, tch::Device::Cpu));
        let y = Tensor::from_slice(&[0i64, 4, 9]);
        assert!((scalar(&confidence_loss(&logits, &y)) - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confidence_saturated_is_zero() {
        let y = Tensor::from_slice(&[2i64, 0]);
        let logits = y.one_hot(4).to_kind(Kind::Double) * 20.0;
        assert!(scalar(&confidence_loss(&logits, &y)) < 1e-6 * 10.0);
        // e^-20 * 3 ≈ 6.2e-9
        assert!(scalar(&confidence_loss(&logits, &y)) < 1e-8);
    }

    #[test]
    fn confidence_hand_value() {
        let logits = t2(&[1.0, 2.0, 3.0], 1, 3);
        let y = Tensor::from_slice(&[2i64]);
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((expected - 0.40761).abs() < 1e-5);
        assert!((scalar(&confidence_loss(&logits, &y)) - expected).abs() < 1e-6);
    }

    #[test]
    fn adversarial_divergence_values() {
        let t = t2(&[0.3, -1.2, 2.0], 1, 3);
        assert!(scalar(&adversarial_divergence_loss(&t, &t)).abs() < 1e-7);
        // softmax [0.75, 0.25] vs [0.25, 0.75]
        let tl = t2(&[3f64.ln(), 0.0], 1, 2);
        let sl = t2(&[0.0, 3f64.ln()], 1, 2);
        let v = scalar(&adversarial_divergence_loss(&tl, &sl));
        let expected = -(0.75 * 3f64.ln() + 0.25 * (1.0f64 / 3.0).ln());
        assert!((expected + 0.549306).abs() < 1e-6);
        assert!((v - expected).abs() < 1e-6);
    }

    #[test]
    fn bn_loss_hand_value_and_errors() {
        let stats = BNStatistics {
            layers: vec![BatchMoments {
                mean: Tensor::from_slice(&[0.0f64]),
                var: Tensor::from_slice(&[1.0f64]),
            }],
        };
        let batch = vec![BatchMoments {
            mean: Tensor::from_slice(&[1.0f64]),
            var: Tensor::from_slice(&[1.0f64]),
        }];
        assert!((scalar(&bn_alignment_loss(&stats, &batch).unwrap()) - 1.0).abs() < 1e-12);
        let same = vec![BatchMoments {
            mean: Tensor::from_slice(&[0.0f64]),
            var: Tensor::from_slice(&[1.0f64]),
        }];
        assert_eq!(scalar(&bn_alignment_loss(&stats, &same).unwrap()), 0.0);
        assert!(matches!(bn_alignment_loss(&stats, &[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn bn_loss_rejects_permuted_layers() {
        let mk = |n: i64| BatchMoments {
            mean: Tensor::zeros([n], (Kind::Double, tch::Device::Cpu)),
            var: Tensor::ones([n], (Kind::Double, tch::Device::Cpu)),
        };
        let stats = BNStatistics { layers: vec![mk(2), mk(3)] };
        assert!(matches!(
            bn_alignment_loss(&stats, &[mk(3), mk(2)]),
            Err(Error::Dimension(_))
        ));
    }

    fn zero_disc(d: i64, nc: i64) -> Discriminator {
        let mut disc = build_discriminator(&DiscriminatorSpec::new(d, nc), 0).unwrap();
        disc.to_double();
        tch::no_grad(|| {
            for (_, mut v) in disc.var_store().variables() {
                let _ = v.zero_();
            }
        });
        disc
    }

    /// Discriminator whose score is `bias` for every input.
    fn const_disc(d: i64, nc: i64, bias: f64) -> Discriminator {
        let disc = zero_disc(d, nc);
        tch::no_grad(|| {
            let vars = disc.var_store().variables();
            let mut b = vars["fc2.bias"].shallow_clone();
            let _ = b.fill_(bias);
        });
        disc
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn discriminator_loss_values() {
        let d = const_disc(2, 2, 0.0);
        let real = disc_input(&Tensor::ones([3, 2], (Kind::Double, tch::Device::Cpu)), &[0, 1, 0], 2, true);
        let fake = disc_input(&Tensor::ones([2, 2], (Kind::Double, tch::Device::Cpu)), &[1, 1], 2, true);
        let v = scalar(&discriminator_loss(&d, &real, &fake, None).unwrap());
        assert!((v - 2f64.ln()).abs() < 1e-6);

        // σ = 0.8 on the real record, σ = 0.3 on the fake one
        let real1 = disc_input(&Tensor::zeros([1, 2], (Kind::Double, tch::Device::Cpu)), &[0], 2, true);
        let fake1 = disc_input(&Tensor::zeros([1, 2], (Kind::Double, tch::Device::Cpu)), &[1], 2, true);
        let mut disc = zero_disc(2, 2);
        tch::no_grad(|| {
            let vars = disc.var_store().variables();
            // hidden unit 0 reads the class-0 slot, unit 1 the class-1 slot
            let w1 = vars["fc1.weight"].shallow_clone();
            let _ = w1.get(0).get(2).fill_(1.0);
            let _ = w1.get(1).get(3).fill_(1.0);
            let w2 = vars["fc2.weight"].shallow_clone();
            let _ = w2.get(0).get(0).fill_(logit(0.8));
            let _ = w2.get(0).get(1).fill_(logit(0.3));
        });
        disc.to_double();
        let v = scalar(&discriminator_loss(&disc, &real1, &fake1, None).unwrap());
        let expected = (-(0.8f64).ln() - (0.7f64).ln()) / 2.0;
        // 0.289905 is the same quantity computed from 5-digit logs
        assert!((expected - 0.2899092).abs() < 1e-6);
        assert!((expected - 0.289905).abs() < 1e-5);
        assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
    }

    #[test]
    fn discriminator_loss_perfect_separation_and_empty() {
        let d = const_disc(2, 2, 40.0);
        let real = disc_input(&Tensor::ones([2, 2], (Kind::Double, tch::Device::Cpu)), &[0, 1], 2, true);
        let empty = Tensor::zeros([0, 4], (Kind::Double, tch::Device::Cpu));
        assert!(scalar(&discriminator_loss(&d, &real, &empty, None).unwrap()) < 1e-12);
        let d = const_disc(2, 2, -40.0);
        assert!(scalar(&discriminator_loss(&d, &empty, &real, None).unwrap()) < 1e-12);
        assert_eq!(scalar(&discriminator_loss(&d, &empty, &empty, None).unwrap()), 0.0);
    }

    #[test]
    fn discriminator_loss_reports_nonfinite_index() {
        let d = const_disc(2, 2, 0.0);
        let f = Tensor::from_slice(&[1.0f64, 2.0, f64::NAN, 0.0]).view([2, 2]);
        let real = disc_input(&f, &[0, 1], 2, true);
        let err = discriminator_loss(&d, &real, &real.narrow(0, 0, 1), None).unwrap_err();
        assert!(err.to_string().contains("batch index 1"), "{err}");
    }

    #[test]
    fn feature_alignment_values() {
        let f = Tensor::ones([4, 3], (Kind::Double, tch::Device::Cpu));
        let x = disc_input(&f, &[0, 1, 1, 0], 2, true);
        let v = scalar(&feature_alignment_loss(&const_disc(3, 2, 0.0), &x, None).unwrap());
        assert!((v - 2f64.ln()).abs() < 1e-6);
        let v = scalar(&feature_alignment_loss(&const_disc(3, 2, 60.0), &x, None).unwrap());
        assert!(v < 1e-12);
    }

    #[test]
    fn generator_loss_weighted_sum() {
        let cfg = InversionConfig::default();
        let s = |v: f64| Tensor::from(v);
        let parts = LossParts {
            conf: s(2.0),
            adv: s(-0.5),
            bn: Some(s(1.0)),
            fa: Some(s(0.6)),
        };
        assert!((scalar(&generator_loss(&cfg, &parts)) - 2.8).abs() < 1e-12);
        let zero = LossParts { conf: s(0.0), adv: s(0.0), bn: Some(s(0.0)), fa: Some(s(0.0)) };
        assert_eq!(scalar(&generator_loss(&cfg, &zero)), 0.0);
        let base = LossParts { conf: s(1.3), adv: s(-0.2), bn: Some(s(0.7)), fa: None };
        let expected = 1.3 * 1.0 + (-0.2) * 1.0 + 0.7;
        assert_eq!(scalar(&generator_loss(&cfg, &base)), expected);
    }
}
