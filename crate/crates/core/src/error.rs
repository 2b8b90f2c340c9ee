use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-positive input: {0}")]
    NonPositiveInput(&'static str),

    // resonance
    #[error("no resonance dip: depth {depth:.3e} vs noise {noise:.3e}")]
    NoResonance { depth: f64, noise: f64 },
    #[error("ill-conditioned fit: {0}")]
    IllConditionedFit(String),
    #[error("sweep span too narrow: linewidth {linewidth:.3e} Hz exceeds half of span {span:.3e} Hz")]
    SpanTooNarrow { linewidth: f64, span: f64 },
    #[error("trace does not decay: {0}")]
    NonDecaying(String),
    #[error("trace span {span:.3e} s is shorter than the fitted decay constant {t1:.3e} s")]
    SpanTooShort { span: f64, t1: f64 },

    // tls
    #[error("insufficient sweep: {0}")]
    InsufficientSpan(String),

    // participation
    #[error("field integrals do not match kind {kind}: {reason}")]
    KindMismatch { kind: String, reason: &'static str },
    #[error("total stored energy must be positive")]
    ZeroTotalEnergy,
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("seam position {position:.6e} m outside (0, {length:.6e}) m")]
    PositionOutOfRange { position: f64, length: f64 },
    #[error("profile grids differ: {0}")]
    GridMismatch(String),
    #[error("local field vanishes at sample {0}")]
    ZeroLocalField(usize),
    #[error("insufficient convergence points: need {needed}, have {have}")]
    InsufficientPoints { needed: usize, have: usize },
    #[error("convergence tail is not monotone")]
    NonConvergent,
    #[error("participation correction must be positive, got {0}")]
    NonPositiveCorrection(f64),

    // solver / budget
    #[error("unit mismatch for {label}: {detail}")]
    UnitMismatch { label: String, detail: String },
    #[error("participation matrix is rank deficient (scaled condition number {0:.3e})")]
    RankDeficient(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("participation of {0} is zero")]
    ZeroParticipation(String),
    #[error("unknown label: {0}")]
    LabelMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("budgets share no mechanism labels")]
    NoOverlap,

    // io
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with the file or label that produced it.
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
