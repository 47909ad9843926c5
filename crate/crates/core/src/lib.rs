//! Small-scale supervised warm-start plus group-relative policy optimisation
//! for multilabel findings extraction, on a synthetic task with a linear
//! softmax policy.

pub mod config;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod parser;
pub mod policy;
pub mod rewards;
pub mod sampler;
pub mod sft;
pub mod toyenv;
pub mod vocab;

pub use error::{Error, Result};
