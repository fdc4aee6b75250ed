//! Command implementations behind the `freqdiff` binary.

pub mod commands;
pub mod config;
pub mod evaluation;

use freqdiff::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Input(_) | Error::Task(_) | Error::Contract(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::Dimension(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}
