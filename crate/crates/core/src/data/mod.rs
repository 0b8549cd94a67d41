//! Synthetic data, scribbles, splits and on-disk formats.

pub mod checkpoint;
pub mod container;
pub mod manifest;
pub mod pnm;
pub mod scribble;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use manifest::{build_split, generate_synthetic_dataset, Dataset, DatasetManifest, LabelKind, Sample, Setting, Split};
pub use synthetic::GenConfig;
