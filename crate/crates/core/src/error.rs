use thiserror::Error;

use crate::surrogate::Partition;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm {norm:e}, which is too small to normalize")]
    ZeroNormRow { row: usize, norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("label {label} is out of range (limit {limit})")]
    LabelOutOfRange { label: usize, limit: usize },

    #[error("non-finite value in {what}")]
    NonFiniteInput { what: &'static str },

    #[error("at least two classes are required")]
    SingleClass,

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("sigma tracker has not been updated yet")]
    TrackerUninitialized,

    #[error("the {0} partition of the prototype bank is empty")]
    EmptyPartition(Partition),

    #[error("reference set is empty")]
    EmptyReference,

    #[error("quality score {value} at index {index} is outside [0, 1]")]
    QualityOutOfRange { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload at byte offset {offset} (expected {expected} bytes in total)")]
    TruncatedPayload { offset: u64, expected: u64 },

    #[error("trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: u64 },

    #[error("label file has {labels} entries but header declares {header}")]
    LabelCountMismatch { header: u64, labels: u64 },

    #[error("malformed label on line {line}: {text:?}")]
    MalformedLabel { line: usize, text: String },

    #[error("unit-norm flag is set but row {row} has norm {norm}")]
    UnitNormViolation { row: usize, norm: f64 },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("malformed csv at line {line}: {reason}")]
    MalformedCsv { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
