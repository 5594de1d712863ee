//! Emulation toolkit for a low-cost mechanically scanning single-beam sonar.
//!
//! The crate covers the whole acquisition-to-evaluation path:
//!
//! - [`acoustics`]: sound speed and the sample-period / sample-distance / range relations.
//! - [`scanmodel`]: sweeps, scan lines, polar/cartesian transforms and rasterization.
//! - [`preprocess`]: ROI gating and per-line statistical thresholding.
//! - [`protocol`]: the binary wire format and a resynchronizing stream decoder.
//! - [`simulator`]: ray-cast pool scenes with shadows, ghost echoes and noise.
//! - [`metrics`]: segmentation losses and the evaluation report.
//! - [`datastore`]: scan files, masks, annotation records and dataset manifests.
//!
//! The numeric modules are generic over [`Real`]; the aliases below fix the
//! scalar to `f64`, which is what the scan files, simulator and services use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod datastore;
mod error;
pub mod metrics;
pub mod preprocess;
pub mod protocol;
pub mod scalar;
pub mod scanmodel;
pub mod simulator;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use scalar::Real;

pub type WaterConditions = acoustics::WaterConditions<f64>;
pub type SamplingPlan = acoustics::SamplingPlan<f64>;
pub type CartesianPoint = scanmodel::CartesianPoint<f64>;
pub type PolarSample = scanmodel::PolarSample<f64>;
pub type RoiSpec = preprocess::RoiSpec<f64>;
pub type LineStats = preprocess::LineStats<f64>;
pub type MaskPair = metrics::MaskPair<f64>;
pub type MetricReport = metrics::MetricReport<f64>;

pub type WaterConditionsF32 = acoustics::WaterConditions<f32>;
pub type SamplingPlanF32 = acoustics::SamplingPlan<f32>;
pub type MaskPairF32 = metrics::MaskPair<f32>;
pub type MetricReportF32 = metrics::MetricReport<f32>;

pub use scanmodel::{Gain, ScanConfig, ScanLine, Sweep, SweepMeta};
