//! Map errors to exit codes and stable machine-readable codes.

use std::fmt;

use duet_core::config::ConfigError;
use duet_core::features::{FormatError, ManifestError};
use duet_core::gw::GwError;
use duet_core::metrics::MetricError;
use duet_core::model::{CheckpointError, TrainError};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_IO: u8 = 5;

/// An input problem detected by the CLI itself.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn format_exit(e: &FormatError) -> u8 {
    if matches!(e, FormatError::Io(_)) {
        EXIT_IO
    } else {
        EXIT_INPUT
    }
}

fn gw_exit(e: &GwError) -> (u8, &'static str) {
    match e {
        GwError::KernelUnderflow { .. } => (EXIT_NUMERIC, "gw-underflow"),
        GwError::NonFinite => (EXIT_NUMERIC, "non-finite"),
        _ => (EXIT_INPUT, "invalid-input"),
    }
}

/// Exit code and error code for the first recognized error in the chain.
pub fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for e in err.chain() {
        if let Some(c) = e.downcast_ref::<CliError>() {
            return (EXIT_INPUT, c.code);
        }
        if let Some(f) = e.downcast_ref::<FormatError>() {
            return (format_exit(f), f.code());
        }
        if let Some(m) = e.downcast_ref::<ManifestError>() {
            return match m {
                ManifestError::Io { .. } => (EXIT_IO, "io"),
                ManifestError::File { source, .. } => (format_exit(source), source.code()),
                _ => (EXIT_INPUT, m.code()),
            };
        }
        if let Some(c) = e.downcast_ref::<CheckpointError>() {
            return match c {
                CheckpointError::Io(_) => (EXIT_IO, "io"),
                _ => (EXIT_INPUT, c.code()),
            };
        }
        if let Some(c) = e.downcast_ref::<ConfigError>() {
            return match c {
                ConfigError::Io { .. } => (EXIT_IO, "io"),
                _ => (EXIT_INPUT, "invalid-config"),
            };
        }
        if let Some(t) = e.downcast_ref::<TrainError>() {
            return match t {
                TrainError::NonFinite { .. } => (EXIT_NUMERIC, "non-finite-loss"),
                TrainError::Gw(g) => gw_exit(g),
                TrainError::Config(_) => (EXIT_INPUT, "invalid-config"),
                TrainError::Data(_) => (EXIT_INPUT, "invalid-data"),
                _ => (EXIT_INTERNAL, "internal"),
            };
        }
        if let Some(g) = e.downcast_ref::<GwError>() {
            return gw_exit(g);
        }
        if e.downcast_ref::<MetricError>().is_some() {
            return (EXIT_INPUT, "invalid-input");
        }
        if e.downcast_ref::<serde_json::Error>().is_some() {
            return (EXIT_INPUT, "invalid-json");
        }
        if e.downcast_ref::<std::io::Error>().is_some() {
            return (EXIT_IO, "io");
        }
    }
    (EXIT_INTERNAL, "internal")
}
