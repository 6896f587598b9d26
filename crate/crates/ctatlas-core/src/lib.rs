//! Construction toolkit for multi-contrast abdominal CT atlases.
//!
//! The pipeline takes raw CT volumes through volume-of-interest extraction
//! (per-slice body-coordinate scores, linear correction, window crop), a
//! two-stage registration to a fixed atlas target (affine block matching
//! followed by discrete dense-displacement search with tree-structured MRF
//! regularization on self-similarity context descriptors), per-phase
//! mean/variance template accumulation, inverse-transform label transfer,
//! and surface-distance evaluation. Synthetic abdominal phantoms provide a
//! reproducible stand-in for clinical cohorts.

pub mod affine;
pub mod atlas;
pub mod deform;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod render;
pub mod ssc;
pub mod voi;
pub mod volume;

pub use affine::AffineTransform;
pub use error::{AtlasError, Result};
pub use field::DenseField;
pub use geometry::Geometry;
pub use volume::{LabelMap, Volume};
