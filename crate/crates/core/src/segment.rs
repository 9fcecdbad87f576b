//! Atlas pull-back into the normalised and physical subject spaces.

use std::collections::BTreeSet;
use std::path::Path;

use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::register::{apply_transform_labels, Diffeomorphism, TransformChain};
use crate::volume::{Grid, LabelTable, LabelVolume};

/// Labels the pre-aligned subject on the template grid:
/// `L(y) = atlas(y + inverse(y))`, nearest neighbour, 0 outside the atlas.
///
/// `diffeo` is the registration of the pre-aligned subject (moving) onto the
/// template (fixed), so its inverse field carries subject points to template
/// points.
pub fn segment_normalized(atlas: &LabelVolume, diffeo: &Diffeomorphism) -> Result<LabelVolume> {
    if !atlas.grid().same_geometry(diffeo.grid(), 1e-6) {
        return Err(Error::SpaceMismatch { expected: diffeo.grid().tag(), found: atlas.grid().tag() });
    }
    let chain = TransformChain::displacement(diffeo.inverse.clone(), "subject-normalized", "template");
    Ok(apply_transform_labels(atlas, &chain, atlas.grid()))
}

/// Carries normalised-space labels onto the native grid:
/// `L(y) = labels(prealign(y))` with `prealign` mapping subject world to
/// template world.
pub fn segment_physical(labels_normalized: &LabelVolume, prealign: &AffineTransform, native: &Grid) -> Result<LabelVolume> {
    if prealign.linear().determinant().abs() < 1e-12 {
        return Err(Error::invalid("pre-alignment affine is singular"));
    }
    let chain = TransformChain::affine(prealign.clone(), "subject-physical", "subject-normalized");
    Ok(apply_transform_labels(labels_normalized, &chain, native))
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub labels_normalized: LabelVolume,
    pub labels_physical: LabelVolume,
    pub label_table: LabelTable,
    /// Labels present in the atlas but missing from the table.
    pub unknown_labels: Vec<u32>,
}

pub fn segment(
    atlas: &LabelVolume,
    diffeo: &Diffeomorphism,
    prealign: &AffineTransform,
    native: &Grid,
    table: &LabelTable,
) -> Result<SegmentationResult> {
    let labels_normalized = segment_normalized(atlas, diffeo)?.with_table(table.clone());
    let labels_physical = segment_physical(&labels_normalized, prealign, native)?;
    let unknown_labels = unknown_labels(atlas, table);
    if !unknown_labels.is_empty() {
        log::warn!("atlas labels without a table entry: {unknown_labels:?}");
    }
    Ok(SegmentationResult { labels_normalized, labels_physical, label_table: table.clone(), unknown_labels })
}

/// Nonzero labels in `labels` that `table` does not name.
pub fn unknown_labels(labels: &LabelVolume, table: &LabelTable) -> Vec<u32> {
    labels.labels().into_iter().filter(|l| !table.contains_key(l)).collect()
}

/// Parses `index<TAB>name` lines. Blank lines and `#` comments are skipped.
pub fn parse_label_table(text: &str) -> Result<LabelTable> {
    let mut table = LabelTable::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("label table line {}: expected `index<TAB>name`", n + 1)))?;
        let idx: u32 = idx
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("label table line {}: bad index `{idx}`", n + 1)))?;
        if !seen.insert(idx) {
            return Err(Error::invalid(format!("label table line {}: duplicate index {idx}", n + 1)));
        }
        table.insert(idx, name.trim().to_string());
    }
    Ok(table)
}

pub fn read_label_table(path: &Path) -> Result<LabelTable> {
    parse_label_table(&std::fs::read_to_string(path)?)
}

pub fn format_label_table(table: &LabelTable) -> String {
    table.iter().map(|(i, n)| format!("{i}\t{n}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VectorField;
    use nalgebra::Vector3;

    fn half_atlas(g: &Grid, plane_x: f64) -> LabelVolume {
        let data = (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                if g.voxel_to_world([i as f64, j as f64, k as f64]).x < plane_x { 1 } else { 2 }
            })
            .collect();
        LabelVolume::new(g.clone(), data).unwrap()
    }

    #[test]
    fn identity_pull_back_is_exact() {
        let g = Grid::with_spacing([10, 6, 5], [1.0; 3], [0.0; 3]).unwrap();
        let a = half_atlas(&g, 4.5);
        assert_eq!(segment_normalized(&a, &Diffeomorphism::identity(g.clone())).unwrap(), a);
        assert_eq!(segment_physical(&a, &AffineTransform::identity(), &g).unwrap(), a);
    }

    #[test]
    fn shift_moves_boundary_opposite() {
        let g = Grid::with_spacing([20, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let a = half_atlas(&g, 10.0);
        let mut d = Diffeomorphism::identity(g.clone());
        d.inverse = VectorField::from_world_fn(g.clone(), |_| Vector3::new(3.0, 0.0, 0.0));
        let l = segment_normalized(&a, &d).unwrap();
        // first label-2 voxel: atlas boundary at x = 10 minus the 3 mm shift
        let first = (0..20).find(|&i| l.get(i, 1, 1) == 2).unwrap();
        assert_eq!(first, 7);
        assert_eq!(l.get(19, 1, 1), 0);
    }

    #[test]
    fn translation_prealign_per_voxel() {
        let g = Grid::with_spacing([12, 12, 12], [1.0; 3], [0.0; 3]).unwrap();
        let data: Vec<u32> = (0..g.len() as u32).map(|i| i % 7).collect();
        let a = LabelVolume::new(g.clone(), data).unwrap();
        let t = AffineTransform::translation([10.0, 0.0, 0.0]);
        let out = segment_physical(&a, &t, &g).unwrap();
        for k in 0..12 {
            for j in 0..12 {
                for i in 0..12 {
                    let want = if i + 10 < 12 { a.get(i + 10, j, k) } else { 0 };
                    assert_eq!(out.get(i, j, k), want);
                }
            }
        }
    }

    #[test]
    fn mismatched_atlas_rejected() {
        let g = Grid::with_spacing([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let h = Grid::with_spacing([4, 4, 4], [2.0; 3], [0.0; 3]).unwrap();
        let err = segment_normalized(&LabelVolume::empty(h), &Diffeomorphism::identity(g)).unwrap_err();
        assert!(matches!(err, Error::SpaceMismatch { .. }));
    }

    #[test]
    fn label_table_parsing() {
        let t = parse_label_table("# regions\n1\tfrontal\n\n2\tocc ipital\n").unwrap();
        assert_eq!(t.get(&2).map(String::as_str), Some("occ ipital"));
        assert_eq!(parse_label_table(&format_label_table(&t)).unwrap(), t);
        assert!(parse_label_table("1\ta\n1\tb\n").is_err());
        assert!(parse_label_table("1 a\n").is_err());
    }
}
