//! File-to-file stage operations, shared by `run` and the single-stage
//! subcommands.

use std::path::Path;

use crate::affine::AffineTransform;
use crate::bonestrip::{strip, StripParams};
use crate::dicom::read_dicom_dir;
use crate::error::{Error, Result};
use crate::nifti::{read_labels, read_nifti, write_labels, write_nifti, Datatype};
use crate::pipeline::config::InputKind;
use crate::preprocess::{preprocess, PreprocessParams};
use crate::quantify::{
    geo_measures_for, jacobian_determinant, physical_jacobian, warp_stats, write_geo_measures_csv,
    write_warp_stats_csv, RegionMeasures, Space, WarpStats,
};
use crate::register::{apply_transform, diffeo_register, read_field, write_field, DiffeoParams, Diffeomorphism, TransformChain};
use crate::segment::{format_label_table, read_label_table, segment, unknown_labels};
use crate::volume::{LabelTable, LabelVolume, SampleMode, Volume3};

pub const SUBJECT_SPACE: &str = "subject-physical";
pub const TEMPLATE_SPACE: &str = "template";

/// Narrowest integer type that holds every label.
pub fn label_datatype(labels: &LabelVolume) -> Datatype {
    match labels.data().iter().copied().max().unwrap_or(0) {
        0..=255 => Datatype::Uint8,
        256..=32767 => Datatype::Int16,
        _ => Datatype::Int32,
    }
}

pub fn load_input(input: &Path, kind: InputKind) -> Result<Volume3> {
    match kind {
        InputKind::DicomDir => read_dicom_dir(input),
        InputKind::Nifti => read_nifti(input),
    }
}

pub fn convert_file(input: &Path, kind: InputKind, out: &Path) -> Result<Volume3> {
    let vol = load_input(input, kind)?;
    write_nifti(&vol, out, Datatype::Float32)?;
    Ok(vol)
}

pub struct PreprocessOutputs<'a> {
    pub aligned: &'a Path,
    pub affine: &'a Path,
    pub native: Option<&'a Path>,
    pub bias_field: Option<&'a Path>,
}

pub fn preprocess_file(input: &Path, template: &Path, params: &PreprocessParams, out: &PreprocessOutputs) -> Result<()> {
    let vol = read_nifti(input)?;
    let tpl = read_nifti(template)?;
    let p = preprocess(&vol, &tpl, params)?;
    write_nifti(&p.aligned, out.aligned, Datatype::Float32)?;
    p.transform.save(out.affine, SUBJECT_SPACE, TEMPLATE_SPACE)?;
    if let Some(path) = out.native {
        write_nifti(&p.native, path, Datatype::Float32)?;
    }
    if let Some(path) = out.bias_field {
        let bias = p.bias_field.unwrap_or_else(|| Volume3::filled(p.native.grid().clone(), 1.0));
        write_nifti(&bias, path, Datatype::Float32)?;
    }
    Ok(())
}

/// Returns the strip warnings.
pub fn bone_strip_file(input: &Path, params: &StripParams, out: &Path, mask_out: &Path) -> Result<Vec<String>> {
    let vol = read_nifti(input)?;
    let r = strip(&vol, params)?;
    write_nifti(&r.stripped, out, Datatype::Float32)?;
    write_labels(&r.mask, mask_out, Datatype::Uint8)?;
    for w in &r.warnings {
        log::warn!("{}: {w}", input.display());
    }
    Ok(r.warnings)
}

pub struct RegisterOutputs<'a> {
    pub warped: &'a Path,
    pub forward: &'a Path,
    pub inverse: &'a Path,
    pub velocity: Option<&'a Path>,
}

/// Registers a pre-aligned, stripped subject (moving) onto the template
/// (fixed), first stripping the template with `template_strip` when given.
/// Returns a one-line summary.
pub fn register_file(
    moving: &Path,
    template: &Path,
    params: &DiffeoParams,
    template_strip: Option<&StripParams>,
    out: &RegisterOutputs,
) -> Result<String> {
    let m = read_nifti(moving)?;
    let mut tpl = read_nifti(template)?;
    if let Some(sp) = template_strip {
        tpl = strip(&tpl, sp)?.stripped;
    }
    let reg = diffeo_register(&m, &tpl, &AffineTransform::identity(), params)?;
    let d = &reg.diffeo;
    let chain = TransformChain::displacement(d.forward.clone(), TEMPLATE_SPACE, "subject-normalized");
    let warped = apply_transform(&m, &chain, tpl.grid(), SampleMode::TRILINEAR_CLAMP);
    write_nifti(&warped, out.warped, Datatype::Float32)?;
    write_field(&d.forward, out.forward, "forward", d.steps)?;
    write_field(&d.inverse, out.inverse, "inverse", d.steps)?;
    if let Some(v) = out.velocity {
        write_field(&d.velocity, v, "velocity", d.steps)?;
    }
    Ok(format!(
        "squaring steps {}; inverse consistency {:.4} mm; min Jacobian {:.4}{}",
        d.steps,
        d.inverse_consistency(),
        d.min_interior_jacobian(),
        if reg.retried { "; finest level re-run with stronger smoothing" } else { "" }
    ))
}

fn load_affine(path: &Path) -> Result<AffineTransform> {
    let (t, src, dst) = AffineTransform::load(path)?;
    if src != SUBJECT_SPACE || dst != TEMPLATE_SPACE {
        return Err(Error::SpaceMismatch { expected: format!("{SUBJECT_SPACE} -> {TEMPLATE_SPACE}"), found: format!("{src} -> {dst}") });
    }
    Ok(t)
}

pub struct SegmentInputs<'a> {
    pub atlas: &'a Path,
    pub forward: &'a Path,
    pub inverse: &'a Path,
    pub affine: &'a Path,
    pub native: &'a Path,
    pub label_table: Option<&'a Path>,
}

pub struct SegmentOutputs<'a> {
    pub physical: &'a Path,
    pub normalized: &'a Path,
    /// Every atlas label with its name (empty when the table lacks it).
    pub labels: Option<&'a Path>,
}

/// Returns atlas labels the table does not name.
pub fn segment_file(inp: &SegmentInputs, out: &SegmentOutputs) -> Result<Vec<u32>> {
    let diffeo = Diffeomorphism::from_fields(read_field(inp.forward)?, read_field(inp.inverse)?)?;
    let mut atlas = read_labels(inp.atlas)?;
    if !atlas.grid().same_geometry(diffeo.grid(), 1e-6) {
        log::info!("atlas grid {} resampled (nearest) onto {}", atlas.grid().tag(), diffeo.grid().tag());
        atlas = atlas.resample(diffeo.grid());
    }
    let table = match inp.label_table {
        Some(p) => read_label_table(p)?,
        None => LabelTable::new(),
    };
    let native = read_nifti(inp.native)?;
    let prealign = load_affine(inp.affine)?;
    let r = segment(&atlas, &diffeo, &prealign, native.grid(), &table)?;
    write_labels(&r.labels_physical, out.physical, label_datatype(&atlas))?;
    write_labels(&r.labels_normalized, out.normalized, label_datatype(&atlas))?;
    if let Some(p) = out.labels {
        let full: LabelTable =
            atlas.labels().into_iter().map(|l| (l, table.get(&l).cloned().unwrap_or_default())).collect();
        std::fs::write(p, format_label_table(&full))?;
    }
    Ok(unknown_labels(&atlas, &table))
}

pub struct PhysicalWarpInputs<'a> {
    pub inverse: &'a Path,
    pub affine: &'a Path,
    pub native_mask: &'a Path,
}

/// Normalized-space statistics of the forward map over `mask`, plus
/// physical-space statistics of the full subject-to-template map when the
/// extra inputs are given.
pub fn warp_stats_rows(
    forward: &Path,
    mask: &Path,
    physical: Option<&PhysicalWarpInputs>,
    bins: usize,
) -> Result<Vec<(Space, WarpStats)>> {
    let mut rows = Vec::new();
    if let Some(p) = physical {
        let inv = read_field(p.inverse)?;
        let t = load_affine(p.affine)?;
        let nmask = read_labels(p.native_mask)?;
        let j = physical_jacobian(&inv, &t, nmask.grid());
        rows.push((Space::Physical, warp_stats(&j, &nmask, bins)?));
    }
    let fwd = read_field(forward)?;
    let mut m = read_labels(mask)?;
    if !m.grid().same_geometry(fwd.grid(), 1e-6) {
        m = m.resample(fwd.grid());
    }
    rows.push((Space::Normalized, warp_stats(&jacobian_determinant(&fwd), &m, bins)?));
    Ok(rows)
}

pub fn write_warp_stats_file(subject: &str, rows: &[(Space, WarpStats)], out: &Path) -> Result<()> {
    let named: Vec<(String, Space, WarpStats)> = rows.iter().map(|(s, w)| (subject.to_string(), *s, w.clone())).collect();
    let mut buf = Vec::new();
    write_warp_stats_csv(&mut buf, &named)?;
    std::fs::write(out, buf)?;
    Ok(())
}

/// Rows for every label of `labels_file` (or of the volumes themselves when
/// no list is given), physical first.
pub fn geo_measures_rows(
    physical: Option<&Path>,
    normalized: Option<&Path>,
    labels_file: Option<&Path>,
) -> Result<Vec<RegionMeasures>> {
    let table = match labels_file {
        Some(p) => Some(read_label_table(p)?),
        None => None,
    };
    let mut rows = Vec::new();
    for (path, space) in [(physical, Space::Physical), (normalized, Space::Normalized)] {
        let Some(path) = path else { continue };
        let l = read_labels(path)?;
        let (t, wanted) = match &table {
            Some(t) => (t.clone(), t.keys().copied().collect()),
            None => (LabelTable::new(), l.labels()),
        };
        rows.extend(geo_measures_for(&l, &t, space, &wanted));
    }
    Ok(rows)
}

pub fn write_geo_measures_file(subject: &str, rows: &[RegionMeasures], out: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_geo_measures_csv(&mut buf, subject, rows)?;
    std::fs::write(out, buf)?;
    Ok(())
}
