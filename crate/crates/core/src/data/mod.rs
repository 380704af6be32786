pub mod checkpoint;
pub mod cifar;
pub mod config;
mod dataset;
pub mod persist;
mod synth;

pub use config::RunConfig;
pub use checkpoint::{load_checkpoint, save_checkpoint, Metadata};
pub use dataset::{accuracy, augment, Dataset, Split};
pub(crate) use dataset::rng_for;
pub use synth::{center_classifier_bias, synth_dataset, SynthShape};
