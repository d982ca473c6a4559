//! Temporal image stacks, annotations, windows, splits and synthetic scenes.

pub mod manifest;
pub mod split;
pub mod stack;
pub mod synth;
pub mod window;

pub use manifest::{load_dataset, Dataset, Manifest, TimestampEntry};
pub use split::{split_segments, validation_slice, SplitAssignment};
pub use stack::{LabelMap, Sample, TemporalImageStack, TimestampImage, BACKGROUND};
pub use synth::{generate, synth_generate, write_dataset, SynthConfig};
pub use window::{extract_batch, extract_timestamps, extract_window, reflect};
