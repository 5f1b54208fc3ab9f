use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("utterance too short: {got} samples, need at least {need}")]
    UtteranceTooShort { got: usize, need: usize },

    #[error("infeasible mel band edges: {0}")]
    BandEdges(String),

    #[error("sequence shorter than shift: T={t}, n={n}")]
    SequenceShorterThanShift { t: usize, n: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("empty mask: no frames selected")]
    EmptyMask,

    #[error("illegal information exchange: {0}")]
    IllegalInformationExchange(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGrad(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
