//! Error types shared across the crate.

use crate::sparse::Coord;
use thiserror::Error;

/// Errors from sparse tensor construction, kernel maps and voxelization.
#[derive(Debug, Error)]
pub enum SparseError {
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoordinate(Coord),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("coordinate {coord:?} is not a multiple of stride {stride}")]
    StrideViolation { coord: Coord, stride: i32 },
    #[error("input is empty")]
    EmptyInput,
}

/// Errors from point-file parsing and writing.
#[derive(Debug, Error)]
pub enum PointIoError {
    #[error("parse error at line {0}")]
    ParseError(usize),
    #[error("bad magic or header in binary point file")]
    BadHeader,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors from binarization and bit-packed arithmetic.
#[derive(Debug, Error)]
pub enum BinarizeError {
    #[error("non-finite weight encountered")]
    NonFiniteWeight,
    #[error("non-finite activation encountered")]
    NonFiniteActivation,
    #[error("all latent weights are zero; scaling factor would be degenerate")]
    DegenerateScale,
    #[error("bit vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Errors from layer and block forwards.
#[derive(Debug, Error)]
pub enum LayerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("output channels {out_channels} not divisible by {groups} groups")]
    GroupDivisibility { out_channels: usize, groups: usize },
    #[error("upsample target coordinates missing")]
    MissingTargetCoords,
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Binarize(#[from] crate::error::BinarizeError),
}

/// Errors from the training loop and losses.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch} outside stage range 0..{max_epochs}")]
    EpochOutOfRange { epoch: usize, max_epochs: usize },
    #[error("all sites carry the ignore label; loss undefined")]
    AllIgnored,
    #[error("node {0} was not recorded on this tape")]
    UnrecordedNode(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Errors from the shift-direction search.
#[derive(Debug, Error)]
pub enum SearchError {
    #[error("shift direction {0:?} needs a window beyond the fused kernel cube")]
    SpaceTooLarge([i32; 3]),
    #[error("group count {0} not divisible by 4")]
    IndivisibleGroups(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed shift config at line {0}")]
    MalformedConfig(usize),
}

/// Errors from network construction, evaluation and diagnostics.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("label slices have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("layer {0} not found")]
    LayerNotFound(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Errors from synthetic scene generation.
#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
}

/// Errors from the checkpoint container format.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,
    #[error("unknown checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint does not match the requested network spec: {0}")]
    IncompatibleSpec(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Top-level error for CLI commands.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    PointIo(#[from] PointIoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit code: 1 for usage/config errors, 2 for runtime/data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}
