//! Explicit-VR little-endian slice writer, used to export synthetic series.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::volume::Volume3;

/// Everything needed to encode one slice file.
#[derive(Debug, Clone)]
pub struct SliceSpec<'a> {
    pub rows: u16,
    pub columns: u16,
    pub pixel_spacing: [f64; 2],
    pub image_position: Vector3<f64>,
    pub row_cosine: Vector3<f64>,
    pub column_cosine: Vector3<f64>,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub series_uid: &'a str,
    pub instance_number: u32,
    pub stored: &'a [i16],
}

fn element(out: &mut Vec<u8>, group: u16, elem: u16, vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&group.to_le_bytes());
    out.extend_from_slice(&elem.to_le_bytes());
    out.extend_from_slice(vr);
    if matches!(vr, b"OB" | b"OW" | b"SQ" | b"UN" | b"UT") {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn padded(s: &str, pad: u8) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

fn ds(values: &[f64]) -> Vec<u8> {
    let s: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    padded(&s.join("\\"), b' ')
}

/// Encodes a single-frame CT slice as a Part 10 byte image.
pub fn encode_slice(spec: &SliceSpec<'_>) -> Vec<u8> {
    let mut body = Vec::new();
    let syntax = padded("1.2.840.10008.1.2.1", 0);
    let sop_class = padded("1.2.840.10008.5.1.4.1.1.2", 0);
    let mut meta = Vec::new();
    element(&mut meta, 0x0002, 0x0001, b"OB", &[0, 1]);
    element(&mut meta, 0x0002, 0x0002, b"UI", &sop_class);
    element(&mut meta, 0x0002, 0x0010, b"UI", &syntax);
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    element(&mut out, 0x0002, 0x0000, b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend(meta);

    element(&mut body, 0x0008, 0x0060, b"CS", &padded("CT", b' '));
    element(&mut body, 0x0020, 0x000E, b"UI", &padded(spec.series_uid, 0));
    element(&mut body, 0x0020, 0x0013, b"IS", &padded(&spec.instance_number.to_string(), b' '));
    let p = spec.image_position;
    element(&mut body, 0x0020, 0x0032, b"DS", &ds(&[p.x, p.y, p.z]));
    let (r, c) = (spec.row_cosine, spec.column_cosine);
    element(&mut body, 0x0020, 0x0037, b"DS", &ds(&[r.x, r.y, r.z, c.x, c.y, c.z]));
    element(&mut body, 0x0028, 0x0002, b"US", &1u16.to_le_bytes());
    element(&mut body, 0x0028, 0x0004, b"CS", &padded("MONOCHROME2", b' '));
    element(&mut body, 0x0028, 0x0010, b"US", &spec.rows.to_le_bytes());
    element(&mut body, 0x0028, 0x0011, b"US", &spec.columns.to_le_bytes());
    element(&mut body, 0x0028, 0x0030, b"DS", &ds(&spec.pixel_spacing));
    element(&mut body, 0x0028, 0x0100, b"US", &16u16.to_le_bytes());
    element(&mut body, 0x0028, 0x0101, b"US", &16u16.to_le_bytes());
    element(&mut body, 0x0028, 0x0102, b"US", &15u16.to_le_bytes());
    element(&mut body, 0x0028, 0x0103, b"US", &1u16.to_le_bytes());
    element(&mut body, 0x0028, 0x1052, b"DS", &ds(&[spec.rescale_intercept]));
    element(&mut body, 0x0028, 0x1053, b"DS", &ds(&[spec.rescale_slope]));
    let pixels: Vec<u8> = spec.stored.iter().flat_map(|v| v.to_le_bytes()).collect();
    element(&mut body, 0x7FE0, 0x0010, b"OW", &pixels);
    out.extend(body);
    out
}

/// Writes `vol` as one file per axis-2 slice (`slice_0000.dcm`, ...).
/// Values are stored as `(HU - intercept) / slope`, which must be an
/// integer in the int16 range.
pub fn write_series(vol: &Volume3, dir: &Path, series_uid: &str, slope: f64, intercept: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let g = vol.grid();
    let [nx, ny, nz] = g.dims();
    let lin = g.linear();
    let (c0, c1, c2) = (lin.column(0).into_owned(), lin.column(1).into_owned(), lin.column(2).into_owned());
    let row_cos = c0.normalize();
    let col_cos = c1.normalize();
    let normal = row_cos.cross(&col_cos);
    if (c2.normalize() - normal).norm() > 1e-6 {
        return Err(Error::invalid("slice axis must follow the right-handed in-plane normal"));
    }
    let mut paths = Vec::with_capacity(nz);
    for k in 0..nz {
        let mut stored = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let s = (vol.get(i, j, k) as f64 - intercept) / slope;
                if s.fract() != 0.0 || s < i16::MIN as f64 || s > i16::MAX as f64 {
                    return Err(Error::invalid(format!("value at ({i},{j},{k}) is not storable as int16")));
                }
                stored.push(s as i16);
            }
        }
        let spec = SliceSpec {
            rows: ny as u16,
            columns: nx as u16,
            pixel_spacing: [c1.norm(), c0.norm()],
            image_position: g.voxel_to_world([0.0, 0.0, k as f64]),
            row_cosine: row_cos,
            column_cosine: col_cos,
            rescale_slope: slope,
            rescale_intercept: intercept,
            series_uid,
            instance_number: k as u32 + 1,
            stored: &stored,
        };
        let path = dir.join(format!("slice_{k:04}.dcm"));
        fs::write(&path, encode_slice(&spec))?;
        paths.push(path);
    }
    Ok(paths)
}
