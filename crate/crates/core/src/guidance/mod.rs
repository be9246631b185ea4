//! Guidance sets: condensed-set I/O, a distribution-matching condenser,
//! few-shot real subsets and per-class feature statistics.

mod condense;
mod fewshot;
mod io;
mod set;
mod stats;

pub use condense::{condense_dm, condense_dm_with, CondenseOptions, Condensed};
pub use fewshot::sample_few_shot;
pub use io::{
    load_condensed, read_condensed_meta, save_condensed, CondensedMeta, FileHashes, FORMAT_VERSION,
    IMAGES_FILE, LABELS_FILE, META_FILE as META_FILE_NAME,
};
pub use set::*;
pub use stats::{class_feature_stats, ClassFeatureStats, ClassMean};
