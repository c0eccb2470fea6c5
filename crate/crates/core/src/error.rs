use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm quaternion")]
    ZeroQuaternion,
    #[error("degenerate 6D rotation: {0}")]
    Degenerate6D(&'static str),
    #[error("zero-length rotation axis")]
    ZeroAxis,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("rank-deficient point configuration")]
    RankDeficient,
    #[error("no labeled keypoints")]
    NoLabeledKeypoints,
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed document: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("png error: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    /// Short stable tag used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroQuaternion => "zero_quaternion",
            Error::Degenerate6D(_) => "degenerate_6d",
            Error::ZeroAxis => "zero_axis",
            Error::Dimension { .. } => "dimension",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::BehindCamera(_) => "behind_camera",
            Error::RankDeficient => "rank_deficient",
            Error::NoLabeledKeypoints => "no_labeled_keypoints",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Png(_) => "png",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}
