#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

//! Rashomon slices of concept-bottleneck models.
//!
//! A slice is a set of `M` concept-bottleneck members sharing one frozen
//! backbone and differing only through low-rank adapters, concept heads and
//! classifiers. The crate provides the tensor tape the members run on, the
//! joint diversity trainer, the diversity metrics, a planted-redundancy data
//! generator and the experiment drivers.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{ConceptDataset, PlantedConfig, Split};
pub use error::{Error, ErrorKind, Result};
pub use model::{Mode, Prediction, RashomonSlice, SliceSpec};
pub use tensor::{MemClass, MemoryMeter, Tape, Tensor, TensorError, Var};
