//! Cross-headset transfer learning for multichannel time-series trials.
//!
//! Trains a full-channel teacher and a common-channel student jointly:
//! the student mimics the teacher through a tempered KL term while its
//! input, feature, and output distributions are aligned to the target
//! headset via session-wise Euclidean alignment, multi-kernel MMD, and an
//! entropy-weighted confusion penalty. Everything runs on a small built-in
//! tensor engine with reverse-mode differentiation, so the whole pipeline
//! is reproducible from a seed on a CPU.

pub mod alignment;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod report;
pub mod tensor;
pub mod training;
pub(crate) mod util;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Real, Tensor};
