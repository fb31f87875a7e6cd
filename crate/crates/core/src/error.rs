use thiserror::Error;

use crate::frame::SourceId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("payload is empty")]
    EmptyPayload,

    #[error(
        "{requested} sources requested but only {available} disjoint pilot sets are configured"
    )]
    TooManySources { requested: usize, available: usize },

    #[error("{bits} payload bits exceed the frame capacity of {capacity} bits")]
    BitOverflow { bits: usize, capacity: usize },

    #[error("no calibration entry for device pair ({tx}, {rx})")]
    UncalibratedDevice { tx: u32, rx: u32 },

    #[error("cannot calibrate from an empty measurement series")]
    EmptySeries,

    #[error("no streams to superimpose")]
    NoStreams,

    #[error("input of {len} samples is shorter than the {needed} samples the correlator needs")]
    InputTooShort { len: usize, needed: usize },

    #[error("no preamble plateau found")]
    NoPlateau,

    #[error("source {0} not found in its long-training search window")]
    SourceNotFound(SourceId),

    #[error("channel estimation failed for source {0}: reference has no usable subcarriers")]
    EstimationFailure(SourceId),

    #[error("timing offset estimate {0:.2} samples is outside the unambiguous range")]
    StoOutOfRange(f64),

    #[error("detection result has no entry for source {0}")]
    UndetectedSource(SourceId),

    #[error("frame window [{start}, {end}) falls outside the {len}-sample capture")]
    WindowOutOfRange { start: i64, end: i64, len: usize },

    #[error("trial ({scenario}, {trial}) has no paired {missing} result")]
    UnpairedTrial {
        scenario: String,
        trial: u64,
        missing: String,
    },

    #[error("no reports to process")]
    NoReports,

    #[error("bad IQ file: {0}")]
    BadIqFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
