//! Fine-grained architecture search over atomic blocks.
//!
//! A supernet of expand → mixed-kernel depthwise → project blocks is trained
//! with a FLOPs-weighted L1 penalty on the depthwise batch-norm scales. Each
//! expanded channel is an independently removable atomic block; blocks whose
//! scale and its moving average both fall below a threshold are cut out of the
//! network while it trains.

pub mod cli;
pub mod data;
pub mod error;
pub mod flops;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
