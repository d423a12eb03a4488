//! Circuit discovery and interpretability tooling for selective
//! state-space language models.

pub mod analysis;
pub mod autodiff;
pub mod circuit;
pub mod error;
pub mod io;
pub mod ioi;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod report;
pub mod tensor;
pub mod testbench;

pub use error::{Error, Result};
