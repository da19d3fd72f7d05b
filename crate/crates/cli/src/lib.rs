//! Experiment runner for memory-based jitter: configuration, run
//! directories and cross-run comparison.

pub mod compare;
pub mod config;
pub mod data;
pub mod run;

use mbj::{ErrorCategory, MbjError};

/// Process exit status for a failed command.
pub fn exit_code(err: &MbjError) -> u8 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Io => 5,
    }
}
