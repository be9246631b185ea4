//! One synthesis round: generator updates against the inversion objective
//! (plus feature alignment when guidance is present), then discriminator
//! updates on augmented feature pairs.

use rand::seq::index;
use tch::{nn, nn::OptimizerConfig, Kind, Tensor};

use super::augment::diff_augment;
use super::config::{AdamSettings, Backend, InversionConfig};
use super::losses::{
    adversarial_divergence_loss, bn_alignment_loss, confidence_loss, discriminator_loss, disc_input,
    feature_alignment_loss, generator_loss, scalar, LossParts,
};
use super::pairs::{build_generic_sets, build_real_fake_sets};
use crate::error::{Error, Result};
use crate::guidance::LabeledImageSet;
use crate::models::{
    build_discriminator, build_generator, Classifier, Discriminator, DiscriminatorSpec, Forward, Generator,
    GeneratorSpec,
};
use crate::rng;

/// Base model-inversion objective evaluated on a generated batch.
pub trait MiBackend {
    fn name(&self) -> &'static str;
    /// Confidence, divergence and optional BN terms; `fa` is left empty.
    fn base_terms(&self, teacher: &Classifier, student: &Classifier, x: &Tensor, y_ps: &Tensor) -> Result<LossParts>;
}

pub struct PlainCe;

pub struct DeepInv;

fn conf_adv(teacher: &Classifier, student: &Classifier, x: &Tensor, y_ps: &Tensor, tap: bool) -> Result<(LossParts, Forward)> {
    let mut f = if tap { Forward::tapped(false) } else { Forward::eval() };
    let (_, t_logits) = teacher.forward_with(x, &mut f)?;
    let s_logits = student.logits_t(x, false)?;
    let parts = LossParts {
        conf: confidence_loss(&t_logits, y_ps),
        adv: adversarial_divergence_loss(&t_logits, &s_logits),
        bn: None,
        fa: None,
    };
    Ok((parts, f))
}

impl MiBackend for PlainCe {
    fn name(&self) -> &'static str {
        "plain_ce"
    }

    fn base_terms(&self, teacher: &Classifier, student: &Classifier, x: &Tensor, y_ps: &Tensor) -> Result<LossParts> {
        Ok(conf_adv(teacher, student, x, y_ps, false)?.0)
    }
}

impl MiBackend for DeepInv {
    fn name(&self) -> &'static str {
        "deepinv"
    }

    fn base_terms(&self, teacher: &Classifier, student: &Classifier, x: &Tensor, y_ps: &Tensor) -> Result<LossParts> {
        let (mut parts, f) = conf_adv(teacher, student, x, y_ps, true)?;
        let stats = teacher.bn_statistics()?;
        parts.bn = Some(bn_alignment_loss(&stats, f.tap.as_deref().unwrap_or(&[]))?);
        Ok(parts)
    }
}

impl Backend {
    pub fn objective(self) -> Result<Box<dyn MiBackend>> {
        match self {
            Backend::PlainCe => Ok(Box::new(PlainCe)),
            Backend::Deepinv => Ok(Box::new(DeepInv)),
            other => Err(Error::Config(format!(
                "backend {other:?} is an interface only; implement `MiBackend` to use it"
            ))),
        }
    }
}

/// Generated images and the pseudo-labels they were optimized for.
#[derive(Debug)]
pub struct SyntheticBatch {
    pub images: Tensor,
    pub pseudo_labels: Vec<i64>,
}

/// Scalar loss values of the last generator and discriminator updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLosses {
    pub conf: f64,
    pub adv: f64,
    pub bn: Option<f64>,
    pub fa: Option<f64>,
    pub loss_g: f64,
    pub loss_d: Option<f64>,
}

#[derive(Debug)]
pub struct StepOutput {
    pub batch: SyntheticBatch,
    pub losses: StepLosses,
}

/// Generator, optional discriminator and their optimizers.
pub struct InversionState {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    opt_g: nn::Optimizer,
    opt_d: Option<nn::Optimizer>,
    cfg: InversionConfig,
    seed: u64,
}

fn adam(vs: &nn::VarStore, a: &AdamSettings) -> Result<nn::Optimizer> {
    Ok(nn::adam(a.beta1, a.beta2, 0.0).build(vs, a.lr)?)
}

impl InversionState {
    /// A discriminator is built only when `disc_spec` is given (guided runs).
    pub fn new(
        gen_spec: &GeneratorSpec,
        disc_spec: Option<&DiscriminatorSpec>,
        cfg: &InversionConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let generator = build_generator(gen_spec, rng::derive(seed, "generator", 0))?;
        let discriminator = disc_spec
            .map(|s| build_discriminator(s, rng::derive(seed, "discriminator", 0)))
            .transpose()?;
        let opt_g = adam(generator.var_store(), &cfg.gen)?;
        let opt_d = discriminator.as_ref().map(|d| adam(d.var_store(), &cfg.disc)).transpose()?;
        Ok(InversionState {
            generator,
            discriminator,
            opt_g,
            opt_d,
            cfg: cfg.clone(),
            seed,
        })
    }

    pub fn config(&self) -> &InversionConfig {
        &self.cfg
    }

    fn reset(&mut self, epoch: usize) -> Result<()> {
        self.generator.reinit(rng::derive(self.seed, "generator", epoch as u64));
        self.opt_g = adam(self.generator.var_store(), &self.cfg.gen)?;
        if let Some(d) = self.discriminator.as_mut() {
            d.reinit(rng::derive(self.seed, "discriminator", epoch as u64));
            self.opt_d = Some(adam(d.var_store(), &self.cfg.disc)?);
        }
        Ok(())
    }
}

/// Reinitializes generator and discriminator (and their optimizers) when
/// `epoch` is a positive multiple of the reset period. Returns whether a
/// reset happened.
pub fn maybe_reset(state: &mut InversionState, epoch: usize) -> Result<bool> {
    let period = state.cfg.reset_period;
    if epoch > 0 && epoch % period == 0 {
        state.reset(epoch)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

fn ensure_frozen(model: &Classifier, who: &str) -> Result<()> {
    if model.var_store().trainable_variables().iter().any(|t| t.requires_grad()) {
        return Err(Error::Config(format!("{who} must be frozen during inversion")));
    }
    Ok(())
}

fn finite(parts: &LossParts, total: &Tensor) -> Result<()> {
    let v = |t: &Option<Tensor>| t.as_ref().map(scalar);
    let total_v = scalar(total);
    if !total_v.is_finite() {
        return Err(Error::Numerical(format!(
            "generator loss {total_v}: conf={} adv={} bn={:?} fa={:?}",
            scalar(&parts.conf),
            scalar(&parts.adv),
            v(&parts.bn),
            v(&parts.fa)
        )));
    }
    Ok(())
}

/// One synthesis round. The teacher must be frozen; the student is frozen
/// for the duration of the call and unfrozen on return.
pub fn invert_step(
    state: &mut InversionState,
    teacher: &Classifier,
    student: &mut Classifier,
    guidance: Option<&LabeledImageSet>,
    seed: u64,
) -> Result<StepOutput> {
    ensure_frozen(teacher, "teacher")?;
    if let Some(g) = guidance {
        if g.is_empty() {
            return Err(Error::EmptySet);
        }
    }
    student.freeze();
    let out = invert_inner(state, teacher, student, guidance, seed);
    student.unfreeze();
    out
}

fn invert_inner(
    state: &mut InversionState,
    teacher: &Classifier,
    student: &Classifier,
    guidance: Option<&LabeledImageSet>,
    seed: u64,
) -> Result<StepOutput> {
    let cfg = state.cfg.clone();
    let backend = cfg.backend.objective()?;
    let nc = teacher.num_classes();
    let aligned = guidance.is_some() && state.discriminator.is_some() && cfg.weights.fa > 0.0;

    let mut r = rng::rng(rng::derive(seed, "latent", 0));
    let z0 = rng::randn(&mut r, &[cfg.batch_size as i64, cfg.nz], Kind::Float);
    let y = rng::labels(&mut r, cfg.batch_size, nc);
    let latent_vs = nn::VarStore::new(tch::Device::Cpu);
    let (z, mut opt_z) = if cfg.latent_lr > 0.0 {
        let z = latent_vs.root().var_copy("z", &z0);
        let opt = nn::adam(cfg.gen.beta1, cfg.gen.beta2, 0.0).build(&latent_vs, cfg.latent_lr)?;
        (z, Some(opt))
    } else {
        (z0, None)
    };
    let y_t = Tensor::from_slice(&y);

    let mut losses = StepLosses::default();
    if aligned && cfg.disc_first {
        let x = tch::no_grad(|| state.generator.forward_t(&z, true));
        losses.loss_d = Some(disc_updates(state, teacher, guidance.unwrap(), &x, &y, seed)?);
    }

    if let Some(d) = state.discriminator.as_mut() {
        d.var_store_mut().freeze();
    }
    for u in 0..cfg.gen_updates {
        let x = state.generator.forward_t(&z, true);
        let mut parts = backend.base_terms(teacher, student, &x, &y_t)?;
        if aligned {
            let disc = state.discriminator.as_ref().unwrap();
            let xa = diff_augment(&x, &cfg.diffaug, rng::derive(seed, "aug-gen", u as u64))?;
            let feats = teacher.features_with(&xa, &mut Forward::eval())?;
            let input = disc_input(&feats, &y, nc, cfg.conditional);
            let mut drop = rng::rng(rng::derive(seed, "dropout-gen", u as u64));
            parts.fa = Some(feature_alignment_loss(disc, &input, Some(&mut drop))?);
        }
        let loss = generator_loss(&cfg, &parts);
        finite(&parts, &loss)?;
        state.opt_g.zero_grad();
        if let Some(o) = opt_z.as_mut() {
            o.zero_grad();
        }
        loss.backward();
        state.opt_g.step();
        if let Some(o) = opt_z.as_mut() {
            o.step();
        }
        losses.conf = scalar(&parts.conf);
        losses.adv = scalar(&parts.adv);
        losses.bn = parts.bn.as_ref().map(scalar);
        losses.fa = parts.fa.as_ref().map(scalar);
        losses.loss_g = scalar(&loss);
    }
    if let Some(d) = state.discriminator.as_mut() {
        d.var_store_mut().unfreeze();
    }

    let images = tch::no_grad(|| state.generator.forward_t(&z, true));
    if aligned && !cfg.disc_first {
        losses.loss_d = Some(disc_updates(state, teacher, guidance.unwrap(), &images, &y, seed)?);
    }
    Ok(StepOutput {
        batch: SyntheticBatch {
            images,
            pseudo_labels: y,
        },
        losses,
    })
}

fn disc_updates(
    state: &mut InversionState,
    teacher: &Classifier,
    guidance: &LabeledImageSet,
    synth: &Tensor,
    y_ps: &[i64],
    seed: u64,
) -> Result<f64> {
    let cfg = &state.cfg;
    let nc = teacher.num_classes();
    let disc = state.discriminator.as_ref().expect("aligned step without discriminator");
    let opt = state.opt_d.as_mut().expect("discriminator without optimizer");
    let mut last = 0.0;
    for k in 0..cfg.disc_updates as u64 {
        let n = guidance.len().min(cfg.guidance_batch);
        let mut r = rng::rng(rng::derive(seed, "guidance-batch", k));
        let idx: Vec<i64> = index::sample(&mut r, guidance.len(), n).into_iter().map(|i| i as i64).collect();
        let (cond_x, cond_y) = guidance.batch(&idx);
        let (sf, cf) = tch::no_grad(|| -> Result<(Tensor, Tensor)> {
            let sa = diff_augment(synth, &cfg.diffaug, rng::derive(seed, "aug-disc-synth", k))?;
            let ca = diff_augment(&cond_x, &cfg.diffaug, rng::derive(seed, "aug-disc-cond", k))?;
            Ok((
                teacher.features_with(&sa, &mut Forward::eval())?,
                teacher.features_with(&ca, &mut Forward::eval())?,
            ))
        })?;
        let (real, fake) = if cfg.conditional {
            build_real_fake_sets(&cf, &cond_y, &sf, y_ps, nc, rng::derive(seed, "wrong-labels", k), cfg.wrong_labels)?
        } else {
            build_generic_sets(&cf, &cond_y, &sf, y_ps)
        };
        let mut drop = rng::rng(rng::derive(seed, "dropout-disc", k));
        let loss = discriminator_loss(
            disc,
            &real.input(nc, cfg.conditional),
            &fake.input(nc, cfg.conditional),
            Some(&mut drop),
        )?;
        last = scalar(&loss);
        if !last.is_finite() {
            return Err(Error::Numerical(format!("discriminator loss {last}")));
        }
        opt.backward_step(&loss);
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{Normalization, SetMeta, SetSource};
    use crate::models::{build_classifier, ArchId, ClassifierSpec};

    fn models() -> (Classifier, Classifier) {
        let spec = ClassifierSpec::new(ArchId::Lenet5, 4, [1, 28, 28]);
        let mut t = build_classifier(&spec, 1).unwrap();
        t.freeze();
        let s = build_classifier(&ClassifierSpec::new(ArchId::Lenet5Half, 4, [1, 28, 28]), 2).unwrap();
        (t, s)
    }

    fn cfg() -> InversionConfig {
        InversionConfig {
            batch_size: 8,
            guidance_batch: 8,
            nz: 16,
            gen_width: 8,
            ..InversionConfig::default()
        }
    }

    fn guidance() -> LabeledImageSet {
        let mut r = rng::rng(5);
        let x = rng::uniform(&mut r, &[8, 1, 28, 28], 0.0, 1.0, Kind::Float);
        let meta = SetMeta {
            dataset_name: "toy".into(),
            nc: 4,
            spc: Some(2),
            normalization: Normalization::identity(1),
            source: SetSource::Condensed,
        };
        LabeledImageSet::new(x, vec![0, 0, 1, 1, 2, 2, 3, 3], meta).unwrap()
    }

    fn state(cfg: &InversionConfig, t: &Classifier, with_disc: bool) -> InversionState {
        let g = GeneratorSpec::for_images(cfg.nz, [1, 28, 28], cfg.gen_width);
        let d = DiscriminatorSpec::new(t.feat_dim(), t.num_classes());
        InversionState::new(&g, with_disc.then_some(&d), cfg, 3).unwrap()
    }

    fn gen_params(s: &InversionState) -> Vec<Tensor> {
        let vars = s.generator.var_store().variables();
        let mut names: Vec<_> = vars.keys().cloned().collect();
        names.sort();
        names.iter().map(|n| vars[n].copy()).collect()
    }

    fn same(a: &[Tensor], b: &[Tensor]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.equal(y))
    }

    #[test]
    fn zero_alignment_weight_reduces_to_base() {
        let (t, mut s) = models();
        let g = guidance();
        let mut c = cfg();
        let mut base = state(&c, &t, false);
        let ob = invert_step(&mut base, &t, &mut s, None, 11).unwrap();
        c.weights.fa = 0.0;
        let mut guided = state(&c, &t, true);
        let og = invert_step(&mut guided, &t, &mut s, Some(&g), 11).unwrap();
        assert!(ob.batch.images.equal(&og.batch.images));
        assert!(same(&gen_params(&base), &gen_params(&guided)));
        assert_eq!(og.losses.fa, None);
        assert_eq!(og.losses.loss_d, None);
        assert_eq!(ob.losses.loss_g, og.losses.loss_g);
    }

    #[test]
    fn alignment_changes_the_update() {
        let (t, mut s) = models();
        let g = guidance();
        let c = cfg();
        let mut base = state(&c, &t, false);
        let ob = invert_step(&mut base, &t, &mut s, None, 11).unwrap();
        let mut guided = state(&c, &t, true);
        let og = invert_step(&mut guided, &t, &mut s, Some(&g), 11).unwrap();
        assert!(og.losses.fa.is_some() && og.losses.loss_d.is_some());
        assert!(!ob.batch.images.equal(&og.batch.images));
    }

    #[test]
    fn deterministic_given_seed() {
        let (t, mut s) = models();
        let g = guidance();
        let c = cfg();
        let run = |s: &mut Classifier| {
            let mut st = state(&c, &t, true);
            let a = invert_step(&mut st, &t, s, Some(&g), 4).unwrap();
            let b = invert_step(&mut st, &t, s, Some(&g), 5).unwrap();
            (a.batch.images, b.batch.images, b.losses)
        };
        let (a1, b1, l1) = run(&mut s);
        let (a2, b2, l2) = run(&mut s);
        assert!(a1.equal(&a2) && b1.equal(&b2));
        assert_eq!(l1, l2);
        assert_eq!(b1.size(), vec![8, 1, 28, 28]);
    }

    #[test]
    fn reset_on_period_boundary_only() {
        let (t, mut s) = models();
        let g = guidance();
        let c = cfg();
        let mut a = state(&c, &t, true);
        let mut b = state(&c, &t, true);
        invert_step(&mut a, &t, &mut s, Some(&g), 1).unwrap();
        for k in 0..3 {
            invert_step(&mut b, &t, &mut s, Some(&g), 100 + k).unwrap();
        }
        assert!(!same(&gen_params(&a), &gen_params(&b)));
        assert!(!maybe_reset(&mut a, 49).unwrap());
        assert!(!maybe_reset(&mut a, 0).unwrap());
        assert!(maybe_reset(&mut a, 50).unwrap());
        assert!(maybe_reset(&mut b, 50).unwrap());
        assert!(same(&gen_params(&a), &gen_params(&b)));
        // Optimizer state is fresh too: the next step matches.
        let oa = invert_step(&mut a, &t, &mut s, Some(&g), 7).unwrap();
        let ob = invert_step(&mut b, &t, &mut s, Some(&g), 7).unwrap();
        assert!(oa.batch.images.equal(&ob.batch.images));
    }

    #[test]
    fn requires_frozen_teacher_and_restores_student() {
        let (mut t, mut s) = models();
        let c = cfg();
        let mut st = state(&c, &t, false);
        invert_step(&mut st, &t, &mut s, None, 0).unwrap();
        assert!(s.var_store().trainable_variables().iter().all(|v| v.requires_grad()));
        t.unfreeze();
        let err = invert_step(&mut st, &t, &mut s, None, 0).unwrap_err();
        assert!(err.to_string().contains("frozen"), "{err}");
    }

    #[test]
    fn empty_guidance_rejected() {
        let (t, mut s) = models();
        let c = cfg();
        let g = guidance();
        let empty = g.select(&[], SetMeta { spc: None, ..g.meta.clone() }).unwrap();
        let mut st = state(&c, &t, true);
        assert!(matches!(invert_step(&mut st, &t, &mut s, Some(&empty), 0), Err(Error::EmptySet)));
    }

    #[test]
    fn interface_only_backends_error() {
        assert!(Backend::Cmi.objective().is_err());
        assert_eq!(Backend::PlainCe.objective().unwrap().name(), "plain_ce");
    }
}
