//! Command-line workflow for synthetic forest-height transfer experiments:
//! scene synthesis, pretraining, fine-tuning, mapping, evaluation, baselines
//! and the scarcity/censoring experiment.

pub mod commands;
pub mod config;
pub mod pipeline;

use forest_transfer::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::Undefined(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}
