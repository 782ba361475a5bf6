//! Layer-wise human/object capture and free-viewpoint rendering from sparse
//! multi-view RGBD input.
//!
//! The library covers the full loop on synthetic data: an analytic SDF scene
//! generator ([`synth`]), TSDF fusion with a non-rigidly tracked key volume
//! ([`tsdf`], [`warp`]), pixel-aligned occupancy reconstruction ([`implicit`]),
//! template-aid rigid object tracking ([`track`]), occlusion/variance-aware
//! view blending ([`blend`]), and metrics plus an end-to-end pipeline
//! ([`metrics`], [`pipeline`]).

pub mod blend;
pub mod geom;
pub mod grid;
pub mod implicit;
pub mod iso;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod synth;
pub mod track;
pub mod tsdf;
pub mod warp;

pub use geom::{Camera, CameraIntrinsics, RigidTransform};
pub use mesh::{Mesh, PointCloud};
pub use raster::{ColorImage, DepthMap, MaskImage, NormalMap};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("object tracking lost: point-to-plane rms {rms:.4} m")]
    TrackingLost { rms: f64 },
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("malformed file {path}: {reason}")]
    Format { path: std::path::PathBuf, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<std::path::PathBuf>, reason: impl Into<String>) -> Self {
        Self::Format { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
