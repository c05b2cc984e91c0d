//! Rock-mass discontinuity mapping and rock-bolt analysis from point clouds.
//!
//! The processing chain is: [`preprocess`] (outlier removal, voxel
//! downsampling, floor removal) → [`descriptors`] (per-point eigen features,
//! computed once) → [`structure`] and [`bolt_detect`] in parallel →
//! [`bolt_geometry`] → [`viz`]. [`pipeline`] wires the stages together and
//! [`synth`] generates tunnels with planted ground truth.

pub mod bolt_detect;
pub mod bolt_geometry;
pub mod cloud;
pub mod cluster;
pub mod descriptors;
pub mod error;
pub mod index;
pub mod io;
pub mod orientation;
pub mod pipeline;
pub mod preprocess;
pub mod structure;
pub mod synth;
pub mod viz;

pub use cloud::{estimate_point_spacing, support_radius, PointCloud, ScaleParams};
pub use error::{Error, Result};
pub use index::{KdTree, SpatialIndex};
