//! Planning and simulation of pipelined Mixture-of-Experts layer training.
//!
//! - [`memmodel`]: closed-form memory footprint with and without buffer reuse.
//! - [`costmodel`]: per-stage stream times and reuse strategy selection.
//! - [`pipesim`]: discrete-event simulation of one layer on three streams.
//! - [`autotune`]: online partition-count search for dynamic batch sizes.

pub mod autotune;
pub mod costmodel;
mod error;
pub mod memmodel;
pub mod model;
pub mod pipesim;

pub use error::{Error, Result};
pub use model::{
    micro_batch_size, BatchSpec, CommMode, Direction, HardwareProfile, ModelSpec, Preset, Restore, ReuseStrategy,
    SlowdownConfig, SlowdownRow, SlowdownTable, Stream, StreamSet, TensorRole,
};
