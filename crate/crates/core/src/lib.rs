//! Simulator and reference executor for a fused embedding-lookup + All-to-All
//! GPU operator, with a timing model, a DLRM iteration model and the
//! baselines it is compared against.

pub mod cli;
pub mod config;
pub mod dlrm;
pub mod embedding;
pub mod error;
pub mod netsim;
pub mod protocol;
pub mod scheduler;
pub mod timesim;
pub mod topology;

pub use error::{Error, ProtocolError, Result};
