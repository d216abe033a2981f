//! Heterogeneous mixture-of-experts fusion for two-modality object tracking,
//! trained with video-level modality masking and evaluated on missing-modality
//! benchmarks, all on a small self-contained reverse-mode autodiff core.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod heads;
pub mod hmoe;
pub mod masking;
pub mod missing;
pub mod model;
pub mod params;
pub mod rng;
pub mod routing;
pub mod synth;
pub mod tensor;
pub mod tokens;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{AdamW, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
