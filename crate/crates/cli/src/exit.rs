//! Process exit codes: 2 config, 3 I/O or format, 4 numerical failure.

use travmap_core::Error;

pub const CONFIG: u8 = 2;
pub const IO_OR_FORMAT: u8 = 3;
pub const NUMERICAL: u8 = 4;

/// Marks an error raised by the CLI itself as a configuration problem.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn core_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => CONFIG,
        Error::NonFinite { .. }
        | Error::NonFiniteLoss { .. }
        | Error::TooFewPoints { .. }
        | Error::RankDeficient { .. }
        | Error::SingularAlignment => NUMERICAL,
        Error::InvalidDimensions { .. }
        | Error::DimensionMismatch { .. }
        | Error::OutOfUnitInterval { .. }
        | Error::NonBinaryLabel { .. }
        | Error::InvalidParameter(_)
        | Error::MalformedHeader(_)
        | Error::DimensionOverflow { .. }
        | Error::TruncatedPayload { .. }
        | Error::NonFinitePayload { .. }
        | Error::TrailingBytes(_)
        | Error::EmptyDataset
        | Error::Checkpoint(_)
        | Error::Io { .. } => IO_OR_FORMAT,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
        if cause.is::<ConfigError>() {
            return CONFIG;
        }
    }
    IO_OR_FORMAT
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn codes_survive_context() {
        let err = Err::<(), _>(Error::Config("x".into()))
            .context("loading")
            .unwrap_err();
        assert_eq!(code_for(&err), CONFIG);
        let err = anyhow::Error::new(Error::SingularAlignment).context("training");
        assert_eq!(code_for(&err), NUMERICAL);
        let err = anyhow::Error::new(ConfigError("bad flag".into()));
        assert_eq!(code_for(&err), CONFIG);
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        assert_eq!(code_for(&anyhow::Error::new(io)), IO_OR_FORMAT);
    }
}
