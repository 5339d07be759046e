//! Hierarchical prototype learning for a small multi-scale detector.
//!
//! The crate carries its own reverse-mode tape, an SVD, scale-aware pseudo
//! labels, the prototype losses, interpretability metrics, a synthetic
//! dataset generator and a toy three-level detector with its training loop.

pub mod assign;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod evaluate;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod pnm;
pub mod proto;
pub mod real;
pub mod splgs;
pub mod train;

pub use autograd::{AutogradError, Gradients, NodeId, Tape, Tensor};
pub use real::Real;
