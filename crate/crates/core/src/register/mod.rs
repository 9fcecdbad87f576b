//! Affine and diffeomorphic registration.

mod affine_reg;
mod demons;
mod exp;
mod io;
mod metric;
mod transform;

pub use affine_reg::{affine_register, affine_register_with, AffineOptions, AffineRegistration};
pub use demons::{diffeo_register, DiffeoParams, DiffeoRegistration, Diffeomorphism};
pub use exp::{exp_velocity, squaring_steps, Direction};
pub use io::{read_field, read_sidecar, sidecar_path, write_field, FieldSidecar};
pub use metric::{mutual_information, MetricContext, MetricValue, SimilarityMetric, MI_BINS};
pub use transform::{apply_transform, apply_transform_labels, TransformChain, TransformStep};
