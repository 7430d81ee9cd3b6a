//! Incremental learning of semantic part models from weakly supervised
//! image collections.
//!
//! The crate covers the whole curriculum: instance box fitting on clean
//! images, part appearance classifiers, viewpoint-conditioned kernel-density
//! location models, automatic part mining in object images, refinement on a
//! harder domain, and detection with average-precision evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod classifier;
pub mod detect;
pub mod error;
pub mod eval;
pub mod features;
pub mod fitting;
pub mod geometry;
pub mod gmm;
pub mod graphcut;
pub mod location;
pub mod manifest;
pub mod mining;
pub mod pipeline;
pub mod proposals;
pub mod raster;
pub mod store;
pub mod synth;
pub mod viewpoint;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, NormalizedBox, Size};
pub use raster::Raster;
