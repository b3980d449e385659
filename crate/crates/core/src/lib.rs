//! Block-wise Gaussian splatting on CPU.
//!
//! The pipeline ingests an SfM sparse reconstruction, partitions the scene
//! into blocks by sparse-point density, optimizes a Gaussian-splat
//! representation per block (with auxiliary primitives covering out-of-block
//! content and a pseudo-view geometry constraint against airspace floaters),
//! and merges the blocks into a single scene model for novel-view rendering.
//!
//! Modules map onto the pipeline stages:
//! - [`sfm`]: COLMAP sparse model parsing/writing, image and depth-prior IO
//! - [`partition`]: binary-tree scene partitioning and view assignment
//! - [`gaussians`]: Gaussian primitive data model, initialization, PLY IO
//! - [`render`]: differentiable CPU rasterizer (forward, backward, oracle)
//! - [`losses`]: photometric, depth-prior and pseudo-view losses
//! - [`train`]: per-block optimization loop with densification
//! - [`merge`]: block merging, metrics, synthetic-scene generation
//! - [`config`]: pipeline configuration shared by the CLI stages

pub mod buffers;
pub mod config;
pub mod gaussians;
pub mod losses;
pub mod merge;
pub mod partition;
pub mod render;
pub mod sfm;
pub mod train;

pub use buffers::{DepthMap, ImageRgb};
