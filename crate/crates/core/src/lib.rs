//! CT volume processing: DICOM/NIfTI ingest, preprocessing, bone stripping,
//! affine and diffeomorphic registration to a template, atlas-based
//! segmentation, and deformation / region quantification.
//!
//! Every stage is a plain function over in-memory [`Volume3`] /
//! [`LabelVolume`] values; [`pipeline`] strings them together over many
//! subjects with on-disk artifacts, a manifest and resumable runs.

pub mod affine;
pub mod bonestrip;
pub mod dicom;
pub mod error;
pub mod field;
pub mod nifti;
pub mod pipeline;
pub mod preprocess;
pub mod quantify;
pub mod register;
pub mod segment;
pub mod synth;
pub mod volume;

pub use affine::{AffineDof, AffineParams, AffineTransform};
pub use error::{Error, Result};
pub use field::{DisplacementField, VectorField};
pub use volume::{Grid, Interpolation, LabelTable, LabelVolume, OutOfBounds, SampleMode, Volume3};

/// Version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
