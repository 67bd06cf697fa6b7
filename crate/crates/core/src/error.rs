use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the numerical core.
///
/// Utterance-scoped validation failures carry the utterance id so that loaders
/// can report them without extra bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Feature and alignment (or latent and alignment) lengths disagree.
    LengthMismatch { utterance: String, expected: usize, found: usize },
    /// A frame label outside the declared phoneme inventory.
    LabelOutOfRange { utterance: String, frame: usize, label: usize, k: usize },
    /// A NaN or infinite feature, or a log-F0 value inconsistent with voicing.
    NonFinite { utterance: String, what: &'static str, index: usize },
    UnknownDomain { utterance: String, code: usize },
    InsufficientData(String),
    OutOfBounds { start: usize, width: usize, len: usize },
    Shape(String),
    Config(String),
    UnseenPhoneme { utterance: usize, frame: usize, phoneme: usize },
    /// Cholesky failed on a covariance that should have been floored.
    Factorization(String),
    NonFiniteLoss { iteration: u64, stage: u8, term: &'static str },
    Empty(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::LengthMismatch { utterance, expected, found } => write!(
                f,
                "utterance {utterance}: length mismatch (features have {expected} frames, alignment has {found})"
            ),
            Error::LabelOutOfRange { utterance, frame, label, k } => write!(
                f,
                "utterance {utterance}: label {label} at frame {frame} is outside the inventory 1..={k}"
            ),
            Error::NonFinite { utterance, what, index } => {
                write!(f, "utterance {utterance}: non-finite {what} at index {index}")
            }
            Error::UnknownDomain { utterance, code } => {
                write!(f, "utterance {utterance}: unknown speaker domain {code}")
            }
            Error::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            Error::OutOfBounds { start, width, len } => write!(
                f,
                "crop [{start}, {start}+{width}) out of bounds for sequence of {len} frames"
            ),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::UnseenPhoneme { utterance, frame, phoneme } => write!(
                f,
                "utterance #{utterance} frame {frame}: phoneme {} has no prior",
                phoneme + 1
            ),
            Error::Factorization(msg) => write!(f, "factorization failed: {msg}"),
            Error::NonFiniteLoss { iteration, stage, term } => write!(
                f,
                "non-finite loss term {term} at stage {stage}, iteration {iteration}"
            ),
            Error::Empty(what) => write!(f, "empty input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
