use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{len} values cannot fill a tensor of shape {shape:?}")]
    BadShape { len: usize, shape: Vec<usize> },

    #[error("{op}: axis {axis} is out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} at pixel {pixel} is outside 0..{classes}")]
    LabelOutOfRange {
        label: u8,
        pixel: usize,
        classes: usize,
    },

    #[error("{0} must be detached from the graph")]
    NotDetached(&'static str),

    #[error("target distribution is not one-hot at pixel {pixel}")]
    NotOneHot { pixel: usize },

    #[error("label map contains no labelled class")]
    NoClasses,

    #[error("{stage}: non-finite loss at step {step} (L_s={supervised}, L_u={unsupervised}, L_m={mixed})")]
    Diverged {
        stage: &'static str,
        step: usize,
        supervised: f64,
        unsupervised: f64,
        mixed: f64,
    },

    #[error("unknown loss kind `{0}`")]
    UnknownLossKind(String),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("malformed image file: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
