//! Dense action detection by decomposing action classes into entity and motion
//! sub-concepts, with a small reverse-mode tensor engine, synthetic data, training
//! and evaluation.

pub mod ablation;
pub mod blob;
pub mod cli;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
