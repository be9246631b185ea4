//! Toy check of label sensitivity in the feature discriminator.
//!
//! Features of class `k` are `N(μ_k, I)` with well separated means. Real
//! pairs carry the true label; synthetic features come from the same
//! distribution with uniformly drawn labels, so only the label can tell the
//! two apart.

use tch::{nn, nn::OptimizerConfig, Kind, Tensor};

use crate::error::Result;
use crate::inversion::{build_generic_sets, build_real_fake_sets, discriminator_loss, disc_input, WrongLabelMode};
use crate::models::{build_discriminator, DiscriminatorSpec};
use crate::rng::{self, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDiscResult {
    /// Matched pairs scored real and mismatched pairs scored fake, averaged
    /// over an equal number of each.
    pub balanced_acc: f64,
    /// Fraction of mismatched pairs scored fake.
    pub mismatched_acc: f64,
}

pub struct ToyTask {
    pub dim: i64,
    pub nc: i64,
    pub separation: f64,
    pub batch: usize,
    pub steps: usize,
    pub held_out: usize,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            dim: 8,
            nc: 5,
            separation: 4.0,
            batch: 64,
            steps: 600,
            held_out: 1000,
        }
    }
}

impl ToyTask {
    fn sample(&self, means: &Tensor, labels: &[i64], r: &mut SeedRng) -> Tensor {
        let idx = Tensor::from_slice(labels);
        means.index_select(0, &idx) + rng::randn(r, &[labels.len() as i64, self.dim], Kind::Float)
    }

    /// Trains a discriminator on the toy task and scores it on held-out pairs.
    pub fn run(&self, conditional: bool, seed: u64) -> Result<ToyDiscResult> {
        let mut r = rng::rng(rng::derive(seed, "toy-means", 0));
        let dirs = rng::randn(&mut r, &[self.nc, self.dim], Kind::Float);
        let means = &dirs / dirs.norm_scalaropt_dim(2, [1], true) * self.separation;

        let disc = build_discriminator(&DiscriminatorSpec::new(self.dim, self.nc), rng::derive(seed, "toy-disc", 0))?;
        let mut opt = nn::adam(0.5, 0.999, 0.0).build(disc.var_store(), 0.002)?;
        for step in 0..self.steps as u64 {
            let mut r = rng::rng(rng::derive(seed, "toy-batch", step));
            let cy = rng::labels(&mut r, self.batch, self.nc);
            let sy = rng::labels(&mut r, self.batch, self.nc);
            let cf = self.sample(&means, &cy, &mut r);
            // synthetic features follow the real distribution; their labels do not
            let true_sy = rng::labels(&mut r, self.batch, self.nc);
            let sf = self.sample(&means, &true_sy, &mut r);
            let (real, fake) = if conditional {
                build_real_fake_sets(&cf, &cy, &sf, &sy, self.nc, rng::derive(seed, "toy-wrong", step), WrongLabelMode::Sampled)?
            } else {
                build_generic_sets(&cf, &cy, &sf, &sy)
            };
            let mut drop = rng::rng(rng::derive(seed, "toy-dropout", step));
            let loss = discriminator_loss(
                &disc,
                &real.input(self.nc, conditional),
                &fake.input(self.nc, conditional),
                Some(&mut drop),
            )?;
            opt.backward_step(&loss);
        }

        let mut r = rng::rng(rng::derive(seed, "toy-held-out", 0));
        let n = self.held_out;
        let y = rng::labels(&mut r, n, self.nc);
        let f = self.sample(&means, &y, &mut r);
        let shift = rng::labels(&mut r, n, self.nc - 1);
        let wrong: Vec<i64> = y.iter().zip(&shift).map(|(&a, &s)| (a + 1 + s) % self.nc).collect();
        let score = |labels: &[i64]| -> Result<Tensor> {
            tch::no_grad(|| disc.forward(&disc_input(&f, labels, self.nc, conditional), None))
        };
        let real_ok = score(&y)?.gt(0.0).to_kind(Kind::Double).mean(None).double_value(&[]);
        let fake_ok = score(&wrong)?.le(0.0).to_kind(Kind::Double).mean(None).double_value(&[]);
        Ok(ToyDiscResult {
            balanced_acc: 0.5 * (real_ok + fake_ok),
            mismatched_acc: fake_ok,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_is_deterministic() {
        let task = ToyTask {
            steps: 20,
            held_out: 50,
            ..ToyTask::default()
        };
        assert_eq!(task.run(true, 3).unwrap(), task.run(true, 3).unwrap());
    }
}
