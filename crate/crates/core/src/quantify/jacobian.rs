use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::field::DisplacementField;
use crate::volume::Volume3;

/// `det(I + ∇u)` at every voxel of the displacement's grid.
///
/// Derivatives are taken along voxel axes (central differences inside,
/// one-sided on the border) and mapped to world coordinates through the
/// inverse of the grid's 3x3 block, so oblique grids are handled.
pub fn jacobian_determinant(u: &DisplacementField) -> Volume3 {
    let g = u.grid().clone();
    let [nx, ny, _] = g.dims();
    let to_world = g.linear().try_inverse().expect("grid affine is invertible");
    let mut out = vec![0.0f32; g.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let d = voxel_gradient(u, [i, j, k]);
                let jac = Matrix3::identity() + d * to_world;
                slice[i + nx * j] = jac.determinant() as f32;
            }
        }
    });
    Volume3::new(g, out).expect("same grid")
}

/// Columns are `∂u/∂index_a`.
pub(crate) fn voxel_gradient(u: &DisplacementField, c: [usize; 3]) -> Matrix3<f64> {
    let dims = u.grid().dims();
    let mut d = Matrix3::zeros();
    for a in 0..3 {
        let n = dims[a];
        if n == 1 {
            continue;
        }
        let mut lo = c;
        let mut hi = c;
        let span;
        if c[a] == 0 {
            hi[a] = 1;
            span = 1.0;
        } else if c[a] == n - 1 {
            lo[a] = n - 2;
            span = 1.0;
        } else {
            lo[a] -= 1;
            hi[a] += 1;
            span = 2.0;
        }
        let diff: Vector3<f64> = (u.at(hi[0], hi[1], hi[2]) - u.at(lo[0], lo[1], lo[2])) / span;
        d.set_column(a, &diff);
    }
    d
}
