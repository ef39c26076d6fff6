//! Point cloud classification and part segmentation with learned critical
//! points as local-area centers.
//!
//! The pipeline: a shared per-point MLP lifts every point to an `m`-wide
//! feature; the column-wise max gives the first global feature and its
//! argmax rows give `m` critical points. Each critical point anchors a
//! k-nearest-neighbor area, enriched with distance features, which is
//! encoded and pooled into area features and then into a second global
//! feature. Both global features feed the prediction heads.

pub mod autodiff;
pub mod cpl;
pub mod data;
pub mod error;
pub mod features;
pub mod geometry;
pub mod network;
pub mod train;

pub use error::{Error, Result};
pub use geometry::PointCloud;
