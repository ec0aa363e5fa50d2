//! Self-contained differentiable-tensor engine and the ABC infrared
//! small-target segmentation network, with training, metrics, and
//! synthetic data generation. Core is `no_std` + `alloc`; IO and the CLI
//! live in the companion `abc-cli` crate.

#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pgm;
pub mod train;

pub use graph::{Graph, GraphError, TensorId};
pub use model::{AbcConfig, AbcModel};
pub use params::{ForwardCtx, ParamId, ParamStore};
