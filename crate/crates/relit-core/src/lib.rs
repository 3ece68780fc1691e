//! Portrait relighting toolkit: morphable face geometry, spherical-harmonic
//! lighting, a soft differentiable rasterizer, bi-branch lighting
//! correction, training-pair synthesis, small neural building blocks, and
//! image quality metrics.
//!
//! The crate is organized around one rendering convention: images are
//! row-major RGB `f64` in `[0, 1]`, the camera sits on +z looking toward
//! -z, and lighting is a 3x9 spherical-harmonic coefficient block.

// Kernels index several parallel buffers with one loop variable; iterator
// rewrites obscure which offsets move together.
#![allow(clippy::needless_range_loop)]

pub mod adam;
pub mod correction;
pub mod dataset;
pub mod error;
pub mod img;
pub mod metrics;
pub mod morphable;
pub mod neural;
pub mod raster;
pub mod sh;

pub use correction::{CorrectionConfig, CorrectionState, LossEntry, SingleBranchResult};
pub use dataset::{DegradeConfig, PairProvenance, TrainingPair};
pub use metrics::{ImagePairMetrics, MetricReport};
pub use error::{RelitError, Result};
pub use img::{PixelMask, RasterImage, ScalarMap};
pub use morphable::{FaceCoefficients, Mesh, MorphableModel, Pose};
pub use raster::{
    AlbedoGradEntries, Camera, CameraKind, GeometryBuffers, NormalMap, RasterConfig, RenderOutput,
};
pub use sh::{ShCoeffs, ShDelta};
