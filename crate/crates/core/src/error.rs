use std::fmt;

use serde::Serialize;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("workload error: {0}")]
    Workload(String),

    #[error("protocol violation: {0}")]
    Protocol(#[from] ProtocolError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// Violations of the fused operator's synchronization protocol.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("logical WG {wg} of slice {slice} completed twice")]
    DoubleCompletion { slice: usize, wg: usize },

    #[error("slice {slice} triggered {count} times")]
    MultipleTriggers { slice: usize, count: u32 },

    #[error("flag for slice {slice} observed at GPU {dest} before its payload was visible")]
    FenceViolation { slice: usize, dest: usize },

    #[error("remote emission requested for slice {slice}, which is not remote")]
    NotRemote { slice: usize },

    #[error("slice {slice} has no rows")]
    EmptySlice { slice: usize },

    #[error("output mismatch at GPU {gpu}, element {index}: got {got}, expected {expected}")]
    OutputMismatch {
        gpu: usize,
        index: usize,
        got: f32,
        expected: f32,
    },

    #[error("{0}")]
    Deadlock(DeadlockReport),
}

/// What was still outstanding when a run stopped making progress.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeadlockReport {
    /// (destination GPU rank, flag index) pairs that were never set.
    pub unset_flags: Vec<(usize, usize)>,
    /// (slice, mask) pairs whose WG_Done mask never became full.
    pub unfull_masks: Vec<(usize, u64)>,
    /// Persistent WGs (global index) that never exited.
    pub stuck_workers: Vec<usize>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "deadlock: {} unset flags, {} unfull masks, {} stuck persistent WGs",
            self.unset_flags.len(),
            self.unfull_masks.len(),
            self.stuck_workers.len()
        )?;
        if let Some((gpu, flag)) = self.unset_flags.first() {
            write!(f, " (first unset flag: GPU {gpu} flag {flag})")?;
        }
        Ok(())
    }
}
