use thiserror::Error;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("conv2d: input has {input} channels but weight expects {weight}")]
    ChannelMismatch { input: usize, weight: usize },

    #[error("conv2d: non-positive output size for input {input:?} (kernel {kernel}x{kernel_w}, stride {stride}, padding {padding}, dilation {dilation})")]
    OutputSize {
        input: [usize; 2],
        kernel: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },

    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("variable belongs to a different tape")]
    ForeignVar,
}
