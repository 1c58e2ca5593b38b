use thiserror::Error;

/// Errors raised by tensor construction, kernels, the protocol and the model file codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shapes {left:?} and {right:?} are not compatible for {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} is out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("{0:?} is not a permutation of the tensor axes")]
    InvalidPermutation(Vec<usize>),
    #[error("non-finite value {0} in rational tensor")]
    NonFinite(f32),
    #[error("scale values must be finite and strictly positive, found {0}")]
    NonPositiveScale(f32),
    #[error("inputs carry different precisions ({0} and {1} bits)")]
    MixedPrecision(u8, u8),
    #[error("precision must lie in 2..=15 bits, got {0}")]
    InvalidPrecision(u32),
    #[error("{0} requires at least one input")]
    EmptyInput(&'static str),
    #[error("{op} expects {expected} inputs, got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("integer overflow in the {lane} accumulator lane during {op}")]
    LaneOverflow { op: &'static str, lane: &'static str },
    #[error("scale is not uniform along axis {0}; match scales along it first")]
    ScaleNotUniform(usize),
    #[error("integer division by a zero denominator payload")]
    ZeroDenominator,
    #[error("payload {value} exceeds the {precision}-bit range at protocol exit")]
    PrecisionViolation { value: i64, precision: u8 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
