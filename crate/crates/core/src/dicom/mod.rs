//! CT DICOM ingest: parse single-frame slices and stack them into a volume.

mod parse;
mod write;

use std::fs;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rayon::prelude::*;
use thiserror::Error;

pub use parse::{parse_dicom_file, DicomSlice, Tag};
pub use write::{encode_slice, write_series, SliceSpec};

use crate::error::Result;
use crate::volume::{Grid, Volume3};

#[derive(Debug, Error, PartialEq)]
pub enum DicomError {
    #[error("dicom: missing 128-byte preamble and \"DICM\" prefix")]
    MissingPreamble,
    #[error("dicom: unsupported transfer syntax {0} (only explicit/implicit VR little endian, uncompressed)")]
    UnsupportedTransferSyntax(String),
    #[error("dicom: encapsulated (compressed) pixel data is not supported")]
    EncapsulatedPixelData,
    #[error("dicom: missing required tag {0}")]
    MissingTag(Tag),
    #[error("dicom: bad value for {tag}: {value}")]
    BadValue { tag: Tag, value: String },
    #[error("dicom: pixel data has {found} bytes, expected {expected}")]
    PixelDataLength { expected: usize, found: usize },
    #[error("dicom: unsupported image: {0}")]
    Unsupported(String),
    #[error("dicom: truncated element at byte {offset}")]
    Truncated { offset: usize },
    #[error("dicom: malformed dataset: {0}")]
    Malformed(String),
    #[error("dicom: series needs at least 2 slices, got {0}")]
    TooFewSlices(usize),
    #[error("dicom: mixed series: {0} vs {1}")]
    MixedSeries(String, String),
    #[error("dicom: inconsistent slice geometry: {0}")]
    InconsistentGeometry(String),
    #[error("dicom: non-uniform slice spacing: {0}")]
    NonUniformSpacing(String),
    #[error("dicom: gantry tilt detected: {0}")]
    GantryTilt(String),
    #[error("dicom: duplicate slice positions: {0}")]
    DuplicatePosition(String),
}

fn name(s: &DicomSlice, idx: usize) -> String {
    s.source.clone().unwrap_or_else(|| format!("slice #{idx}"))
}

/// Sorts slices along the slice normal and stacks them into a HU volume.
///
/// Voxel `(i, j, k)` is column `i`, row `j` of the `k`-th slice in ascending
/// normal-projected order, so the affine columns are
/// `row_cosine * column_spacing`, `column_cosine * row_spacing` and the
/// measured inter-slice step along the normal.
pub fn assemble_series(slices: &[DicomSlice]) -> Result<Volume3> {
    if slices.len() < 2 {
        return Err(DicomError::TooFewSlices(slices.len()).into());
    }
    let first = &slices[0];
    for (idx, s) in slices.iter().enumerate().skip(1) {
        if s.series_uid != first.series_uid {
            return Err(DicomError::MixedSeries(first.series_uid.clone(), s.series_uid.clone()).into());
        }
        if s.rows != first.rows || s.columns != first.columns {
            return Err(DicomError::InconsistentGeometry(format!(
                "{} is {}x{}, {} is {}x{}",
                name(first, 0),
                first.rows,
                first.columns,
                name(s, idx),
                s.rows,
                s.columns
            ))
            .into());
        }
        let dsp = (0..2).map(|a| (s.pixel_spacing[a] - first.pixel_spacing[a]).abs()).fold(0.0, f64::max);
        if dsp > 1e-3 {
            return Err(DicomError::InconsistentGeometry(format!(
                "pixel spacing {:?} vs {:?} ({})",
                first.pixel_spacing,
                s.pixel_spacing,
                name(s, idx)
            ))
            .into());
        }
        let dori = (0..2)
            .map(|a| (s.image_orientation[a] - first.image_orientation[a]).amax())
            .fold(0.0, f64::max);
        if dori > 1e-3 {
            return Err(DicomError::InconsistentGeometry(format!("orientation differs at {}", name(s, idx))).into());
        }
    }

    let normal = first.normal().normalize();
    let mut order: Vec<(f64, usize)> =
        slices.iter().enumerate().map(|(i, s)| (s.image_position.dot(&normal), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut collisions = Vec::new();
    for w in order.windows(2) {
        if (w[1].0 - w[0].0).abs() < 1e-3 {
            collisions.push(format!("{} and {}", name(&slices[w[0].1], w[0].1), name(&slices[w[1].1], w[1].1)));
        }
    }
    if !collisions.is_empty() {
        return Err(DicomError::DuplicatePosition(collisions.join("; ")).into());
    }

    let n = order.len();
    let steps: Vec<f64> = order.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let mean_step = (order[n - 1].0 - order[0].0) / (n - 1) as f64;
    if let Some(bad) = steps.iter().find(|s| (*s - mean_step).abs() > 1e-2) {
        return Err(DicomError::NonUniformSpacing(format!("step {bad:.4} mm vs mean {mean_step:.4} mm")).into());
    }
    for w in order.windows(2) {
        let d: Vector3<f64> = slices[w[1].1].image_position - slices[w[0].1].image_position;
        let along = d.dot(&normal);
        let perp = (d - normal * along).norm();
        if perp > 1e-2 {
            return Err(DicomError::GantryTilt(format!(
                "{} is offset {perp:.4} mm off the slice normal",
                name(&slices[w[1].1], w[1].1)
            ))
            .into());
        }
    }

    let origin = slices[order[0].1].image_position;
    let [row_cos, col_cos] = first.image_orientation;
    let col0 = row_cos * first.pixel_spacing[1];
    let col1 = col_cos * first.pixel_spacing[0];
    let col2 = normal * mean_step;
    let mut m = Matrix4::identity();
    for r in 0..3 {
        m[(r, 0)] = col0[r];
        m[(r, 1)] = col1[r];
        m[(r, 2)] = col2[r];
        m[(r, 3)] = origin[r];
    }
    let grid = Grid::new([first.columns, first.rows, n], m)?;
    let mut data = Vec::with_capacity(grid.len());
    for &(_, idx) in &order {
        data.extend(slices[idx].hounsfield());
    }
    Volume3::new(grid, data)
}

/// Parses every regular file in `dir` (sorted by name) and assembles the
/// series. Files without the DICM prefix are skipped.
pub fn read_dicom_dir(dir: &Path) -> Result<Volume3> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let parsed: Vec<Result<Option<DicomSlice>>> = paths
        .par_iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            match parse_dicom_file(&bytes) {
                Ok(mut s) => {
                    s.source = Some(p.display().to_string());
                    Ok(Some(s))
                }
                Err(DicomError::MissingPreamble) => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect();
    let mut slices = Vec::new();
    for p in parsed {
        if let Some(s) = p? {
            slices.push(s);
        }
    }
    assemble_series(&slices)
}
