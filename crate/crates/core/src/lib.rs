//! Dual-stream collaborative transformer for caption generation.
//!
//! Region and segmentation feature sequences are encoded by a stack of
//! pattern-specific mutual attention layers ([`psmae`]); a stack of dynamic
//! nomination decoder layers ([`dnd`]) attends to both and, per word, picks
//! one stream's candidate through a straight-through Gumbel-softmax.
//!
//! The crate also carries what is needed to train and judge the model at
//! desk scale: a synthetic scene corpus ([`data`]), caption metrics
//! ([`metrics`]), cross-entropy and self-critical training ([`train`]),
//! checkpoints and the command implementations behind the `dsct` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decode;
pub mod dnd;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod psmae;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{Features, Fusion, Model, ModelConfig};
