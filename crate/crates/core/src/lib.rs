//! Viewpoint-aware training-data mining and evaluation for visual place
//! recognition.
//!
//! The pipeline:
//!
//! 1. [`geo`] partitions UTM space into square cells and assigns them to
//!    non-adjacent groups that rotate between epochs;
//! 2. [`mining`] fits a principal frame to each cell's capture positions,
//!    places lateral and frontal focal points and collects the images that
//!    look at them into classes;
//! 3. [`cosface`] is the large-margin cosine loss used to train on those
//!    classes, and [`trainer`] runs it end to end on a synthetic city;
//! 4. [`eval`] computes exact kNN retrieval and recall@N;
//! 5. [`io`] holds the manifest and descriptor file formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cosface;
pub mod error;
pub mod eval;
pub mod geo;
pub mod io;
pub mod mining;
pub mod trainer;

pub use error::{Error, Result};
pub use geo::{CellIndex, GridConfig, GroupId, ImageRecord, UtmPoint};
pub use mining::{MinedClass, MiningConfig, PrincipalFrame, Role};
