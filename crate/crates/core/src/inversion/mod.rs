//! Model inversion guided by a small labeled set.

mod augment;
mod config;
mod losses;
mod pairs;
mod step;

pub use augment::{diff_augment, diff_augment_named};
pub use config::{AdamSettings, AugOp, Backend, InversionConfig, LossWeights, WrongLabelMode};
pub use losses::{
    adversarial_divergence_loss, bn_alignment_loss, confidence_loss, disc_input, discriminator_loss,
    feature_alignment_loss, generator_loss, kl_rows, scalar, LossParts,
};
pub use pairs::{build_generic_sets, build_real_fake_sets, DiscriminatorPair, PairBatch, Target};
pub use step::{
    invert_step, maybe_reset, DeepInv, InversionState, MiBackend, PlainCe, StepLosses, StepOutput, SyntheticBatch,
};
