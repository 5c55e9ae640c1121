//! Command implementations behind the `sgrpf` binary.
//!
//! Everything IO-shaped lives here: CSV/JSON formats, run manifests, the
//! replicate worker pool, and per-command drivers. The binary in
//! `main.rs` only parses arguments and maps errors to exit codes.

pub mod args;
pub mod commands;
pub mod formats;
pub mod sweep;

/// Exit-code contract: 0 ok, 2 usage, 3 numeric failure, 4 divergence.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Divergence(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => write!(f, "usage error: {s}"),
            CliError::Numeric(s) => write!(f, "numeric failure: {s}"),
            CliError::Divergence(s) => write!(f, "divergence: {s}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<sgrpf_core::FilterError> for CliError {
    fn from(e: sgrpf_core::FilterError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

/// Wall clock backed by the system timer.
pub struct SystemClock {
    start: std::time::Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { start: std::time::Instant::now() }
    }
}

impl sgrpf_core::learn::Clock for SystemClock {
    fn now_secs(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}
