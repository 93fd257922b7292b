//! Desk-scale RGB-D observation pipeline: pinhole lifting, synchronized
//! cropping, normal estimation, voxel-grid compression, patch-index
//! alignment, scatter-mean pooling, gated residual token fusion, and the
//! training objectives (flow matching plus token sequence loss) that
//! consume the fused tokens.
//!
//! Numeric conventions used throughout:
//! * camera frame: x right, y down, z forward (optical axis), meters;
//! * pixel coordinates are integer indices, no half-pixel offset;
//! * depth 0.0 marks an invalid pixel;
//! * all internal arithmetic is f64, file formats store f32.

pub mod alignment;
pub mod compression;
pub mod datapipe;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod objectives;
pub mod ply;
mod util;
