//! Vector fields on disk: a 5-D NIfTI plus a plain-text sidecar.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::nifti::{read_vector_field, write_vector_field};

/// Sidecar metadata stored next to a field file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSidecar {
    pub grid: String,
    /// `forward`, `inverse` or `velocity`.
    pub kind: String,
    pub steps: u32,
}

/// `fwd.nii.gz` → `fwd.field.txt`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).unwrap_or(&name);
    path.with_file_name(format!("{stem}.field.txt"))
}

pub fn write_field(field: &VectorField, path: &Path, kind: &str, steps: u32) -> Result<()> {
    write_vector_field(field, path)?;
    let mut text = String::new();
    writeln!(text, "grid\t{}", field.grid().tag()).unwrap();
    writeln!(text, "kind\t{kind}").unwrap();
    writeln!(text, "steps\t{steps}").unwrap();
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<FieldSidecar> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)?;
    let bad = |reason: String| Error::TransformFile { path: side.clone(), reason };
    let mut grid = None;
    let mut kind = None;
    let mut steps = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('\t').ok_or_else(|| bad(format!("expected `key<TAB>value`, got `{line}`")))?;
        match k {
            "grid" => grid = Some(v.to_string()),
            "kind" => kind = Some(v.to_string()),
            "steps" => steps = Some(v.parse().map_err(|_| bad(format!("bad step count `{v}`")))?),
            _ => return Err(bad(format!("unknown key `{k}`"))),
        }
    }
    match (grid, kind, steps) {
        (Some(grid), Some(kind), Some(steps)) => Ok(FieldSidecar { grid, kind, steps }),
        _ => Err(bad("missing grid, kind or steps".into())),
    }
}

/// Reads a field; when a sidecar exists its grid tag must match the file.
pub fn read_field(path: &Path) -> Result<VectorField> {
    let field = read_vector_field(path)?;
    if sidecar_path(path).exists() {
        let side = read_sidecar(path)?;
        if side.grid != field.grid().tag() {
            return Err(Error::SpaceMismatch { expected: side.grid, found: field.grid().tag() });
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use nalgebra::Vector3;

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar_path(Path::new("a/fwd.nii.gz")), Path::new("a/fwd.field.txt"));
        assert_eq!(sidecar_path(Path::new("inv.nii")), Path::new("inv.field.txt"));
    }

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii.gz");
        let g = Grid::with_spacing([5, 4, 3], [1.0, 2.0, 3.0], [1.0, 0.0, -1.0]).unwrap();
        let f = VectorField::from_world_fn(g, |p| Vector3::new(p.x, -p.y, 0.5 * p.z));
        write_field(&f, &p, "velocity", 4).unwrap();
        assert_eq!(read_field(&p).unwrap().data(), f.data());
        let side = read_sidecar(&p).unwrap();
        assert_eq!((side.kind.as_str(), side.steps), ("velocity", 4));
    }
}
