//! Instance-aligned pixel-aligned implicit functions for single-view
//! holistic indoor-scene reconstruction.
//!
//! The crate is organised in layers:
//!
//! - [`geometry`]: camera model, instance poses, frame conversions.
//! - [`mesh`]: triangle meshes, OBJ round-trips, watertightness checks.
//! - [`sampling`]: mesh occupancy oracle and training-point samplers.
//! - [`meshing`]: marching cubes over scalar fields.
//! - [`metrics`]: chamfer distance, F-score, ICP alignment.
//! - [`nn`]: a small deterministic neural-network engine (forward +
//!   analytic backward, Adam), generic over [`Scalar`] so gradients can be
//!   verified in 64-bit while training runs in 32-bit.
//! - [`features`]: hourglass image encoder, global encoders, feature
//!   sampling.
//! - [`instpifu`]: the instance-aligned occupancy decoder with attentional
//!   channel filtering and spatial-guided mask supervision.
//! - [`background`]: the room-geometry occupancy network.
//! - [`scenegen`]: procedural scene corpus generation, rasterisation and
//!   dataset IO.
//! - [`pipeline`]: training, evaluation, reconstruction and ablation runs.

pub mod background;
pub mod checkpoint;
pub mod features;
pub mod geometry;
pub mod instpifu;
pub mod mesh;
pub mod meshing;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod scenegen;

use std::fmt;

/// Floating-point scalar the numeric code is generic over.
///
/// `f32` is the working precision for network training; `f64` is used for
/// geometry, metrics and finite-difference verification of gradients.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumCast
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, panicking only on values outside the target
    /// type's range (never for the finite constants used here).
    fn from_f(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 must convert")
    }

    /// Widens to `f64`.
    fn to_f(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("scalar must widen to f64")
    }

    /// Converts an index or count.
    fn from_us(v: usize) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("usize must convert")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default precision for geometry, sampling, meshing and metrics.
pub type Real = f64;
/// Default precision for network parameters and activations.
pub type NetReal = f32;

pub type Camera64 = geometry::Camera<f64>;
pub type InstancePose64 = geometry::InstancePose<f64>;
pub type Box2D64 = geometry::Box2D<f64>;
pub type Mesh64 = mesh::TriMesh<f64>;
pub type FeatureMap32 = features::FeatureMap<f32>;
pub type GlobalFeature32 = features::GlobalFeature<f32>;
pub type RoiFeature32 = instpifu::RoiFeature<f32>;
pub type AmodalMask32 = instpifu::AmodalMask<f32>;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point at camera depth {z} is behind the camera")]
    BehindCamera { z: f64 },

    #[error("all query points project behind the camera")]
    AllPointsBehindCamera,

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("mesh is not watertight: {reason}")]
    NotWatertight { reason: String },

    #[error("marching cubes produced no surface (field does not cross the level set)")]
    EmptySurface,

    #[error("scene placement failed after {attempts} attempts (occlusion target {target})")]
    PlacementFailed { attempts: usize, target: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty point set passed to {op}")]
    EmptyPointSet { op: &'static str },

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("unsupported manifest version {found} (supported: {supported})")]
    ManifestVersion { found: u32, supported: u32 },

    #[error("dataset adapter {adapter:?}: scene {scene} instance {instance} has no amodal mask")]
    MissingAmodal {
        adapter: String,
        scene: String,
        instance: usize,
    },

    #[error("unknown dataset adapter {0:?}")]
    UnknownAdapter(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::Malformed`].
    pub fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
