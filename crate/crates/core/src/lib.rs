//! Crash-time temporal localization on long feature sequences.
//!
//! The crate implements the full pipeline: a selective state-space temporal
//! encoder with HiPPO initialization, motion-variance adaptive sampling with
//! multi-level token compression, hierarchical multi-resolution processing,
//! a boundary-refining localization head, three-phase training, sliding-window
//! long-sequence inference, and the evaluation protocol (MAE, Accuracy@K,
//! failure-inclusive metrics), plus a deterministic synthetic corpus
//! generator used to exercise everything end to end.

pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod model;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod ssm;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
