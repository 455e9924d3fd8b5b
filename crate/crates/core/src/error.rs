use std::io;

use crate::volume::Dims;

/// Errors raised across the toolkit. Each variant names the operation that failed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: Dims, right: Dims },

    #[error("{op}: dims {dims} must be even and >= 2 on every axis")]
    OddDims { op: &'static str, dims: Dims },

    #[error("data length {len} does not match dims {dims}")]
    BadLength { dims: Dims, len: usize },

    #[error("dct_resample: target {target} exceeds source {source_dims}")]
    TargetTooLarge { source_dims: Dims, target: Dims },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("simulate_diffraction: shape is identically zero")]
    ZeroShape,

    #[error("{op}: empty support")]
    EmptySupport { op: &'static str },

    #[error("run_phase_retrieval: shrink-wrap produced an empty support at iteration {iteration}")]
    SupportCollapsed { iteration: usize },

    #[error("refine: non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("generate_spec: {attempts} consecutive draws rejected for seed {seed}")]
    RejectionExhausted { seed: u64, attempts: usize },

    #[error("voxelize_occupancy: polyhedron exceeds the central half of the box (axis {axis})")]
    ExceedsOversamplingBound { axis: usize },

    #[error("voxelize_occupancy: occupancy fraction {fraction:.4} below minimum")]
    TooSmall { fraction: f64 },

    #[error("{op}: shape mismatch: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("train: empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
