use std::path::PathBuf;

use thiserror::Error;

use crate::dicom::DicomError;
use crate::nifti::NiftiError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Nifti(#[from] NiftiError),

    #[error(transparent)]
    Dicom(#[from] DicomError),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("field not diffeomorphic: {0}")]
    NotDiffeomorphic(String),

    #[error("space mismatch: expected `{expected}`, found `{found}`")]
    SpaceMismatch { expected: String, found: String },

    #[error("malformed transform file {path}: {reason}")]
    TransformFile { path: PathBuf, reason: String },

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
