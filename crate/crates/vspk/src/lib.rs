//! Few-shot text-independent speaker verification from raw waveforms.
//!
//! The crate trains a small 3-D convolutional embedding network directly on
//! stacked raw-waveform volumes, enrolls unseen speakers from a handful of
//! short clips, and verifies probe utterances against the enrolled models.
//! Everything runs on one CPU core with reproducible results for a fixed
//! seed; there are no native dependencies.
//!
//! Start with [`tensor::Tape`] for the autodiff substrate, `network` for the
//! embedding model, and the `examples/` directory for end-to-end usage.

pub mod audio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod fewshot;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
