//! Synthetic multi-task data, on-disk datasets and splits.

pub mod dataset;
pub mod split;
pub mod synth;

pub use dataset::{build_dataset, sample_id, sample_seed, DatasetManifest, SampleEntry};
pub use split::{split_ids, split_partition, Fraction, SplitManifest};
pub use synth::{default_tasks, synth_image, ImageSample, Mask, TaskSpec};
