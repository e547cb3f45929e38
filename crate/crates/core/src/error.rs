use thiserror::Error;

use crate::ledger::OpKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capacity violation: {needed} slots needed, {available} available")]
    Capacity { needed: usize, available: usize },

    #[error("depth budget exhausted: {op} attempted at level 0 ({context})")]
    DepthExhausted { op: &'static str, context: String },

    #[error("slot vector has length {got}, scheme expects {expected}")]
    SlotLength { expected: usize, got: usize },

    #[error("rotation amount {amount} out of range for {slots} slots")]
    RotationRange { amount: usize, slots: usize },

    #[error("cannot align a level-{level} ciphertext up to level {target}")]
    LevelAlign { level: u32, target: u32 },

    #[error("ciphertext key does not match session key")]
    KeyMismatch,

    #[error("caller is not authorized to decrypt")]
    Unauthorized,

    #[error("no cost entry for {kind:?} at level {level}")]
    MissingCost { kind: OpKind, level: u32 },

    #[error(
        "weight-update index {index} (i={i}, j={j}) must be below the pi-set size n={n}"
    )]
    StepTwoIndex { i: usize, j: usize, index: usize, n: usize },

    #[error("attestation of the TEE failed for {0}")]
    Attestation(String),

    #[error("oracle mismatch: max relative error {max_rel_err:e} exceeds {tolerance:e}")]
    OracleMismatch { max_rel_err: f64, tolerance: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{phase}: {source}")]
    InPhase {
        phase: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with the pipeline stage it came from. Nested annotations
    /// are kept, outermost first.
    pub fn in_phase(self, phase: impl Into<String>) -> Self {
        Error::InPhase { phase: phase.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping phase annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::InPhase { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_depth_exhausted(&self) -> bool {
        matches!(self.root(), Error::DepthExhausted { .. })
    }
}

pub(crate) trait PhaseExt<T> {
    fn phase(self, phase: impl FnOnce() -> String) -> Result<T>;
}

impl<T> PhaseExt<T> for Result<T> {
    fn phase(self, phase: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.in_phase(phase()))
    }
}
