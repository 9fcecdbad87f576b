//! Test-side oracles, written independently of the library internals.

#![allow(dead_code)]

use ctatlas::{DisplacementField, Grid, LabelVolume};
use nalgebra::{Matrix3, Vector3};

pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u32) -> f64 {
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += usize::from(x == label);
        nb += usize::from(y == label);
        both += usize::from(x == label && y == label);
    }
    if na + nb == 0 {
        return 1.0;
    }
    2.0 * both as f64 / (na + nb) as f64
}

fn world(g: &Grid, i: usize, j: usize, k: usize) -> Vector3<f64> {
    g.voxel_to_world([i as f64, j as f64, k as f64])
}

fn at(u: &DisplacementField, i: usize, j: usize, k: usize) -> Vector3<f64> {
    let [nx, ny, _] = u.grid().dims();
    let v = u.data()[i + nx * (j + ny * k)];
    Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

/// Trilinear sample of a displacement field at a world point, clamped to the
/// grid edge.
pub fn sample(u: &DisplacementField, p: &Vector3<f64>) -> Vector3<f64> {
    let g = u.grid();
    let c = g.world_to_voxel(p);
    let dims = g.dims();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let x = c[a].clamp(0.0, hi);
        let f = x.floor().min((dims[a].max(2) - 2) as f64).max(0.0);
        base[a] = f as usize;
        frac[a] = if dims[a] == 1 { 0.0 } else { x - f };
    }
    let mut acc = Vector3::zeros();
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                if w == 0.0 {
                    continue;
                }
                let i = (base[0] + dx).min(dims[0] - 1);
                let j = (base[1] + dy).min(dims[1] - 1);
                let k = (base[2] + dz).min(dims[2] - 1);
                acc += at(u, i, j, k) * w;
            }
        }
    }
    acc
}

fn interior(g: &Grid) -> impl Iterator<Item = [usize; 3]> {
    let [nx, ny, nz] = g.dims();
    (1..nz.saturating_sub(1))
        .flat_map(move |k| (1..ny.saturating_sub(1)).flat_map(move |j| (1..nx.saturating_sub(1)).map(move |i| [i, j, k])))
}

/// Max over interior voxels of `|x + f(x) + b(x + f(x)) - x|`.
pub fn max_round_trip(forward: &DisplacementField, inverse: &DisplacementField) -> f64 {
    let g = forward.grid();
    interior(g)
        .map(|[i, j, k]| {
            let f = at(forward, i, j, k);
            let y = world(g, i, j, k) + f;
            (f + sample(inverse, &y)).norm()
        })
        .fold(0.0, f64::max)
}

/// Determinant of `I + Du` by central differences, at every interior voxel.
pub fn interior_jacobians(u: &DisplacementField) -> Vec<f64> {
    let g = u.grid();
    let to_index = g.linear().try_inverse().unwrap();
    interior(g)
        .map(|[i, j, k]| {
            let cols = [
                (at(u, i + 1, j, k) - at(u, i - 1, j, k)) / 2.0,
                (at(u, i, j + 1, k) - at(u, i, j - 1, k)) / 2.0,
                (at(u, i, j, k + 1) - at(u, i, j, k - 1)) / 2.0,
            ];
            let du_di = Matrix3::from_columns(&cols);
            (Matrix3::identity() + du_di * to_index).determinant()
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
