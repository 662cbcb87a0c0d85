//! ecmnet: a lightweight CNN + state-space hybrid for semantic segmentation.
//!
//! The crate bundles the network blocks (bottleneck blocks with dual
//! attention, multi-scale skip refinement, a selective-scan fusion module),
//! full model assembly with an ablation lattice, dataset handling, metrics,
//! budget analysis, a deterministic training loop and the CLI surface.
//!
//! Everything runs on a small tape-based autodiff engine that is generic over
//! f32 (training) and f64 (gradient checks and numeric oracles).

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod elem;
pub mod ffm;
pub mod metrics;
pub mod model;
pub mod msau;
pub mod nn;
pub mod ops;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use autodiff::{Grads, Tape, Var};
pub use elem::Scalar;
pub use tensor::Tensor;
