use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value first produced by {0}")]
    NonFinite(String),

    #[error("{axis} extent {extent} is not divisible by scale {scale}")]
    NotDivisible {
        axis: &'static str,
        extent: usize,
        scale: usize,
    },

    #[error("reference band {0} has zero mean")]
    ZeroMeanBand(usize),

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("bad magic: not a {0} file")]
    BadMagic(&'static str),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("header declares {declared} payload bytes but {computed} follow from its dimensions")]
    LengthMismatch { declared: usize, computed: usize },

    #[error("trailing data: {0} bytes after payload")]
    TrailingData(usize),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NonFinite(_) => "non_finite",
            Error::NotDivisible { .. } => "not_divisible",
            Error::ZeroMeanBand(_) => "zero_mean_band",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::BadMagic(_) => "bad_magic",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::TrailingData(_) => "trailing_data",
            Error::Header(_) => "bad_header",
            Error::Checkpoint(_) => "bad_checkpoint",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}
