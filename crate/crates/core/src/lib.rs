//! Mask-quality machinery for long-tailed instance segmentation:
//! area-ratio-aware proposal-to-level assignment, the balanced mask loss
//! (dice + weighted binary cross-entropy) with analytic gradients and a
//! finite-difference verifier, repeat-factor sampling and pseudo-label
//! filtering, a modified multi-scale test-time merge, and a synthetic
//! thin-mask benchmark with a mask-AP evaluator.
//!
//! Everything is deterministic given its inputs and a seed; random streams
//! are keyed by stable ids so results do not depend on thread count.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod levels;
pub mod longtail;
pub mod loss;
pub mod mask;
pub mod synth;
pub mod tta;

pub use error::{Error, Result};
