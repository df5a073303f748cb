//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! grouped by how the command-line driver should exit: data/validation
//! problems, convergence failures, and I/O failures map to distinct process
//! exit codes (see [`exit_code`]).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or invalid input data (bad row, bad code, bad
    /// flag combination). The message names the offending value.
    #[error("validation: {0}")]
    Validation(String),

    /// A structured parse failure in an input file, with location.
    #[error("parse error in {path} (record {record}): {msg}")]
    Parse {
        path: String,
        record: usize,
        msg: String,
    },

    /// The log posterior or its gradient became non-finite. Names the
    /// parameter slot so the failure is diagnosable.
    #[error("non-finite log posterior at parameter `{slot}`: {detail}")]
    NonFinite { slot: String, detail: String },

    /// Sampler could not find a valid starting point or step size.
    #[error("sampler initialization failed: {0}")]
    Init(String),

    /// The fit ran but did not converge (R-hat gate, pervasive divergences).
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// Posterior draws do not match the parameter layout expected by the
    /// model that is asked to consume them.
    #[error("draw layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit code for an error, as documented in the CLI contract:
/// `2` for validation/data problems, `3` for convergence failures,
/// `4` for I/O failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_)
        | Error::Parse { .. }
        | Error::NonFinite { .. }
        | Error::Init(_)
        | Error::LayoutMismatch(_) => 2,
        Error::Convergence(_) => 3,
        Error::Io(_) => 4,
        Error::Csv(e) => {
            if e.is_io_error() {
                4
            } else {
                2
            }
        }
        Error::Json(e) => {
            if e.is_io() {
                4
            } else {
                2
            }
        }
    }
}
