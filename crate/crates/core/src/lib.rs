//! Detection toolkit for small-data object detection pipelines.
//!
//! The crate covers everything around a detector that does not involve
//! training it:
//!
//! - [`geometry`]: normalized boxes, IoU, clipping and COCO size classes.
//! - [`data_io`]: COCO annotation/result JSON, images and pipeline config.
//! - [`augment`]: box-aware color jitter, flip, letterbox, mosaic and mixup.
//! - [`mim_mask`]: masked-image-modeling data machinery (patch masks,
//!   hierarchical visibility, sparse gather/scatter, per-patch targets,
//!   masked L2 loss and a reference sparse convolution).
//! - [`tta`]: invertible test-time views and inverse box mapping.
//! - [`fusion`]: NMS, weighted box fusion and top-k model selection.
//! - [`eval`]: COCO-style AP evaluation with size-stratified metrics.
//! - [`cli`]: the `detkit` command line front end.

pub mod augment;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod mim_mask;
pub mod tta;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, LabeledBox, SizeClass};
