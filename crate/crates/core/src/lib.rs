//! Joint object-level segmentation and semantic labeling of road scenes
//! from an aligned color image and a sparse lidar scan.
//!
//! Stages, in pipeline order:
//!
//! 1. [`registration`] projects the scan into the image and densifies depth.
//! 2. [`hypothesis`] extracts the ground plane and Euclidean object clusters.
//! 3. [`priors`] fits per-object Gaussian mixtures over pixel features.
//! 4. [`crnn`] scores each object patch with a convolutional-recursive network.
//! 5. [`crf`] builds the two-layer CRF and minimizes its energy with graph cuts.
//! 6. [`eval`] measures segmentation and labeling quality.
//!
//! [`synthetic`] generates scenes with exact ground truth and [`pipeline`]
//! wires the stages together.

pub mod config;
pub mod crf;
pub mod crnn;
pub mod hypothesis;
pub mod io;
pub mod kmeans;
pub mod priors;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod registration;
pub mod scene;
pub mod synthetic;

pub use config::{default_config, FeatureConfig, InferenceMode, PipelineConfig};
pub use error::{Error, Result};
pub use scene::{
    AxisScaling, CameraCalibration, Category, ColorImage, DepthMap, DepthSource, FeatureImage, LabelMaps,
    PointCloud,
};
