//! Central finite differences against autograd, in f64 on tiny shapes.

use cskd::distill::{kd_loss, KdDirection};
use cskd::inversion::{
    adversarial_divergence_loss, bn_alignment_loss, confidence_loss, disc_input, discriminator_loss,
    feature_alignment_loss,
};
use cskd::models::{build_discriminator, BNStatistics, BatchMoments, DiscriminatorSpec};
use cskd::rng;
use tch::{Kind, Tensor};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn numeric_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Vec<f64> {
    let base: Vec<f64> = x.flatten(0, -1).try_into().unwrap();
    let shape = x.size();
    (0..base.len())
        .map(|i| {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                f(&Tensor::from_slice(&v).view(shape.as_slice())).double_value(&[])
            };
            (eval(H) - eval(-H)) / (2.0 * H)
        })
        .collect()
}

fn analytic_grad(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> Vec<f64> {
    let x = x.detach().set_requires_grad(true);
    let y = f(&x);
    let g = Tensor::run_backward(&[y], &[&x], false, false).remove(0);
    g.flatten(0, -1).try_into().unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn check(name: &str, f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) {
    let a = analytic_grad(f, x);
    let n = numeric_grad(f, x);
    let e = rel_err(&a, &n);
    assert!(a.iter().any(|v| v.abs() > 1e-9), "{name}: gradient is identically zero");
    assert!(e < TOL, "{name}: relative error {e:e}");
}

fn randn(seed: u64, shape: &[i64]) -> Tensor {
    rng::randn(&mut rng::rng(seed), shape, Kind::Double)
}

#[test]
fn confidence_gradient() {
    let y = Tensor::from_slice(&[0i64, 2, 1, 2]);
    check("confidence", &|x| confidence_loss(x, &y), &randn(1, &[4, 3]));
}

#[test]
fn adversarial_divergence_gradient() {
    let t = randn(2, &[3, 4]);
    let s = randn(3, &[3, 4]);
    check("adv wrt student", &|x| adversarial_divergence_loss(&t, x), &s);
    check("adv wrt teacher", &|x| adversarial_divergence_loss(x, &s), &t);
}

#[test]
fn bn_alignment_gradient() {
    // Batch moments of a (n, c, h, w) activation, biased variance as in BN.
    let run = BNStatistics {
        layers: vec![BatchMoments {
            mean: randn(4, &[2]),
            var: randn(5, &[2]).abs() + 0.5,
        }],
    };
    let f = |x: &Tensor| {
        let mean = x.mean_dim(&[0i64, 2, 3][..], false, Kind::Double);
        let var = x.var_correction(&[0i64, 2, 3][..], 0, false);
        bn_alignment_loss(&run, &[BatchMoments { mean, var }]).unwrap()
    };
    check("bn", &f, &randn(6, &[3, 2, 2, 2]));
}

fn double_disc(d: i64, nc: i64, seed: u64) -> cskd::models::Discriminator {
    let mut disc = build_discriminator(
        &DiscriminatorSpec {
            hidden: 16,
            ..DiscriminatorSpec::new(d, nc)
        },
        seed,
    )
    .unwrap();
    disc.to_double();
    disc
}

#[test]
fn feature_alignment_gradient() {
    let disc = double_disc(5, 3, 7);
    let labels = [0i64, 1, 2, 1];
    let f = |x: &Tensor| feature_alignment_loss(&disc, &disc_input(x, &labels, 3, true), None).unwrap();
    check("fa", &f, &randn(8, &[4, 5]));
    let g = |x: &Tensor| feature_alignment_loss(&disc, &disc_input(x, &labels, 3, false), None).unwrap();
    check("fa generic", &g, &randn(9, &[4, 5]));
}

#[test]
fn discriminator_loss_gradient_wrt_fake_features() {
    let disc = double_disc(4, 2, 10);
    let real = disc_input(&randn(11, &[3, 4]), &[0, 1, 1], 2, true);
    let f = |x: &Tensor| discriminator_loss(&disc, &real, &disc_input(x, &[1, 0], 2, true), None).unwrap();
    check("disc", &f, &randn(12, &[2, 4]));
}

#[test]
fn kd_gradient() {
    let t = randn(13, &[3, 5]);
    for dir in [KdDirection::StudentFirst, KdDirection::TeacherFirst] {
        for tau in [1.0, 3.0] {
            check(&format!("kd {dir:?} tau {tau}"), &|x| kd_loss(x, &t, tau, dir), &randn(14, &[3, 5]));
        }
    }
}
