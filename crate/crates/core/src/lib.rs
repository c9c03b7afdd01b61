//! Single-column crowd counting: a differentiable tensor core, the network
//! (residual fusion modules, pyramid pooling, sub-pixel decoder), ground-truth
//! density generation, online sampling, and a train/eval harness.

pub mod arch;
pub mod data;
pub mod density;
pub mod error;
pub mod tensor;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
