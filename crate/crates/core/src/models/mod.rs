//! Model zoo: classifiers with a penultimate-feature hook, the image
//! generator, the feature discriminator, checkpoints and teacher training.

mod checkpoint;
mod classifier;
mod discriminator;
mod generator;
mod init;
mod layers;
mod train;

pub use checkpoint::{load_classifier, read_meta, save_classifier, CheckpointMeta, META_FILE, WEIGHTS_FILE};
pub use classifier::{build_classifier, ArchId, BNStatistics, Classifier, ClassifierSpec, REGISTRY};
pub use discriminator::{build_discriminator, Discriminator, DiscriminatorSpec};
pub use generator::{build_generator, Activation, Generator, GeneratorSpec};
pub use init::reinit;
pub use layers::{BatchMoments, Forward};
pub use train::{one_hot, train_teacher, TrainHp, TrainReport};
