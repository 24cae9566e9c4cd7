//! Z-stack aware mitosis detection.
//!
//! The crate covers the whole path from multi-plane slide rasters to the
//! statistics table comparing single-layer and z-stack scans:
//!
//! * [`scanmodel`]: scan profiles, physical coordinates and rescaling.
//! * [`tilestore`]: the on-disk plane-stack store and the tiling planner.
//! * [`detector`]: candidate generation and patch scoring (external score
//!   files, raster blobs, or the analytic defocus model).
//! * [`zmerge`]: cross-plane duplicate merging (grid + union-find).
//! * [`fusion`]: plane x model feature tensors and a deterministic random forest.
//! * [`registration`]: two-stage annotation transfer between scans.
//! * [`evalstats`]: detection matching, sensitivity/precision, bootstrap,
//!   one-way ANOVA, Tukey HSD and the comparison report.
//! * [`simkit`]: synthetic slides and paired single-layer vs z-stack experiments.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iterators otherwise. Every random
//! draw is derived from a [`seeds::SeedTree`], so results never depend on the
//! number of workers.

// `!(x > 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod evalstats;
pub mod fusion;
pub mod par;
pub mod pipeline;
pub mod raster;
pub mod registration;
pub mod scanmodel;
pub mod seeds;
pub mod simkit;
pub mod tilestore;
pub mod zmerge;

pub use error::{Error, Result};
pub use scanmodel::{PointUm, ScanProfile, WorkingResolution};
