//! Dense keyframe depth from optical-flow correspondences and camera poses.
//!
//! The pipeline triangulates a depth per keyframe pixel from the flow to each
//! adjacent frame, scores every depth with the Hessian and residual of its
//! least-squares fit, refines the map under a confidence-weighted objective
//! and attaches a per-pixel Laplacian uncertainty. Around that core sit file
//! IO, a synthetic ground-truth generator, frame selection and the metric
//! harness used to evaluate the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;

pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod rasterio;
pub mod refine;
pub mod select;
pub mod synth;
pub mod triangulate;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Ray, RelativePose};
pub use metrics::{MetricReport, SweepRow};
pub use rasterio::{FlowField, Raster, Trajectory};
pub use refine::{ConfidenceInputs, RefineConfig, RefineResult, WeightMaps};
pub use select::{Selection, SelectionMode, SelectionPolicy};
pub use synth::{NoiseModel, SyntheticScene};
pub use triangulate::{InitialDepth, TriangulationConfig, TriangulationInput};
