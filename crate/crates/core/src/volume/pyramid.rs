use nalgebra::Vector4;

use super::{gaussian_smooth, Grid, SampleMode, Volume3};

/// No pyramid level is allowed to have an axis shorter than this.
pub const MIN_PYRAMID_DIM: usize = 4;

/// Grid with doubled spacing and halved (ceiling) dims, centred on the same
/// physical extent. Returns `None` if any axis would drop below
/// [`MIN_PYRAMID_DIM`].
pub fn half_resolution_grid(grid: &Grid) -> Option<Grid> {
    let dims = grid.dims().map(|d| d.div_ceil(2));
    if dims.iter().any(|&d| d < MIN_PYRAMID_DIM) {
        return None;
    }
    let mut affine = *grid.affine();
    for c in 0..3 {
        for r in 0..3 {
            affine[(r, c)] *= 2.0;
        }
    }
    let shift = grid.affine() * Vector4::new(0.5, 0.5, 0.5, 0.0);
    for r in 0..3 {
        affine[(r, 3)] += shift[r];
    }
    Grid::new(dims, affine).ok()
}

/// Multiresolution pyramid, finest first. Each level is the previous one
/// smoothed by one voxel sigma and resampled at twice the spacing.
pub fn build_pyramid(vol: &Volume3, levels: usize) -> Vec<Volume3> {
    let mut out = vec![vol.clone()];
    while out.len() < levels.max(1) {
        let prev = out.last().unwrap();
        let Some(grid) = half_resolution_grid(prev.grid()) else {
            break;
        };
        let smoothed = gaussian_smooth(prev, prev.spacing()).expect("spacing is positive");
        out.push(smoothed.resample(&grid, SampleMode::TRILINEAR_CLAMP));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_level_is_input() {
        let g = Grid::with_spacing([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::filled(g, 2.0);
        let p = build_pyramid(&v, 1);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], v);
    }

    #[test]
    fn halving_schedule() {
        let g = Grid::with_spacing([64, 64, 64], [1.0; 3], [0.0; 3]).unwrap();
        let p = build_pyramid(&Volume3::filled(g, 1.0), 3);
        let dims: Vec<_> = p.iter().map(|v| v.dims()[0]).collect();
        let sp: Vec<_> = p.iter().map(|v| v.spacing()[0]).collect();
        assert_eq!(dims, vec![64, 32, 16]);
        assert_eq!(sp, vec![1.0, 2.0, 4.0]);
        // extent centre is unchanged
        for v in &p {
            assert!((v.grid().center() - p[0].grid().center()).norm() < 1e-9);
        }
    }

    #[test]
    fn truncated_before_axis_drops_below_minimum() {
        let g = Grid::with_spacing([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let p = build_pyramid(&Volume3::filled(g, 1.0), 4);
        assert_eq!(p.len(), 2);
        assert_eq!(p[1].dims(), [4, 4, 4]);
    }

    #[test]
    fn odd_dims_use_ceiling() {
        let g = Grid::with_spacing([9, 10, 11], [1.0; 3], [0.0; 3]).unwrap();
        let h = half_resolution_grid(&g).unwrap();
        assert_eq!(h.dims(), [5, 5, 6]);
    }
}
