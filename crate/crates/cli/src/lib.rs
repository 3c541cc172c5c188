//! Experiment orchestration behind the `rlcharge` binary.

pub mod commands;
pub mod config;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DIVERGED: i32 = 2;
    pub const IO: i32 = 3;
}

/// Exit code for a failed command: IO failures anywhere in the cause chain
/// map to [`exit::IO`], everything else to [`exit::USAGE`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let mut cause: Option<&(dyn std::error::Error + 'static)> = Some(err.as_ref());
    while let Some(c) = cause {
        if c.is::<std::io::Error>() || matches!(c.downcast_ref::<rlcharge::Error>(), Some(rlcharge::Error::Io { .. })) {
            return exit::IO;
        }
        cause = c.source();
    }
    exit::USAGE
}
