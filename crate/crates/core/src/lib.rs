//! Traversability estimation from a single RGB raster.
//!
//! Three semantic hypotheses trained under asymmetric losses give a mean
//! traversable probability and an inter-hypothesis variance; two geometric
//! heads distilled from depth-derived pseudo labels give slope and elevation
//! risk. The pieces are fused multiplicatively into a score in `[0, 1]`.
//!
//! The crate is organised bottom-up:
//!
//! - [`dense_map`] and [`raster`]: the grid type and its on-disk formats.
//! - [`pdt_losses`], [`geo_losses`]: training objectives with analytic gradients.
//! - [`uncertainty`], [`geometry`], [`fusion`]: the inference-time algebra.
//! - [`model`]: features, tokens, decoding, training and inference.
//! - [`scenes`]: procedural terrain with analytic ground truth.
//! - [`eval`]: thresholded metrics, corruptions, dataset evaluation.

pub mod config;
pub mod dense_map;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geo_losses;
pub mod geometry;
pub mod model;
pub mod pdt_losses;
pub mod raster;
pub mod scenes;
pub mod uncertainty;

pub use dense_map::{DenseMap, ElementwiseOp, UnitIntervalMap};
pub use error::{Error, Result};
pub use fusion::TraversabilityOutput;
pub use geometry::GroundPlane;
pub use model::{TokenBank, TrainConfig};
pub use pdt_losses::{HypothesisSet, PerspectiveConfig};
pub use raster::RgbImage;
pub use scenes::{Preset, Scene, SceneParams};
