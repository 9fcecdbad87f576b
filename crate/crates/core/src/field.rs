//! Per-voxel world-frame 3-vector fields (velocities and displacements).

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{smooth_buffer, Grid, Volume3};

/// Vector field sampled on a grid. Vectors are in world millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    data: Vec<[f32; 3]>,
}

/// A displacement field `u` defines the map `x ↦ x + u(x)`.
pub type DisplacementField = VectorField;

impl VectorField {
    pub fn new(grid: Grid, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "field length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector field contains non-finite values"));
        }
        Ok(VectorField { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let data = vec![[0.0; 3]; grid.len()];
        VectorField { grid, data }
    }

    pub fn from_world_fn<F>(grid: Grid, f: F) -> Self
    where
        F: Fn(Vector3<f64>) -> Vector3<f64> + Sync,
    {
        let [nx, ny, _] = grid.dims();
        let mut data = vec![[0.0f32; 3]; grid.len()];
        data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let v = f(grid.voxel_to_world([i as f64, j as f64, k as f64]));
                    slice[i + nx * j] = [v.x as f32, v.y as f32, v.z as f32];
                }
            }
        });
        VectorField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let v = self.data[self.grid.index(i, j, k)];
        Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    pub fn max_norm(&self) -> f64 {
        self.data
            .par_iter()
            .map(norm3)
            .reduce(|| 0.0, f64::max)
    }

    /// Largest vector norm over interior voxels only.
    pub fn max_norm_interior(&self) -> f64 {
        let g = &self.grid;
        (0..g.len())
            .into_par_iter()
            .filter(|&idx| {
                let [i, j, k] = g.coords(idx);
                g.is_interior(i, j, k)
            })
            .map(|idx| norm3(&self.data[idx]))
            .reduce(|| 0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        let data = self
            .data
            .par_iter()
            .map(|v| [(v[0] as f64 * s) as f32, (v[1] as f64 * s) as f32, (v[2] as f64 * s) as f32])
            .collect();
        VectorField { grid: self.grid.clone(), data }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.check_same_grid(other)?;
        let data = self
            .data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
            .collect();
        Ok(VectorField { grid: self.grid.clone(), data })
    }

    pub(crate) fn check_same_grid(&self, other: &VectorField) -> Result<()> {
        if !self.grid.same_geometry(&other.grid, 1e-9) {
            return Err(Error::SpaceMismatch { expected: self.grid.tag(), found: other.grid.tag() });
        }
        Ok(())
    }

    /// Trilinear sample at a world point, clamp-to-edge.
    #[inline]
    pub fn sample_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.sample_voxel(self.grid.world_to_voxel(p))
    }

    #[inline]
    pub fn sample_voxel(&self, c: [f64; 3]) -> Vector3<f64> {
        let d = self.grid.dims();
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut step = [0usize; 3];
        for a in 0..3 {
            let x = if c[a].is_finite() { c[a].clamp(0.0, (d[a] - 1) as f64) } else { 0.0 };
            if d[a] == 1 {
                continue;
            }
            let b = (x.floor() as usize).min(d[a] - 2);
            base[a] = b;
            t[a] = x - b as f64;
            step[a] = 1;
        }
        let sy = d[0] * step[1];
        let sz = d[0] * d[1] * step[2];
        let i0 = base[0] + d[0] * (base[1] + d[1] * base[2]);
        let mut out = [0.0f64; 3];
        let corners = [
            (0, (1.0 - t[0]) * (1.0 - t[1]) * (1.0 - t[2])),
            (step[0], t[0] * (1.0 - t[1]) * (1.0 - t[2])),
            (sy, (1.0 - t[0]) * t[1] * (1.0 - t[2])),
            (sy + step[0], t[0] * t[1] * (1.0 - t[2])),
            (sz, (1.0 - t[0]) * (1.0 - t[1]) * t[2]),
            (sz + step[0], t[0] * (1.0 - t[1]) * t[2]),
            (sz + sy, (1.0 - t[0]) * t[1] * t[2]),
            (sz + sy + step[0], t[0] * t[1] * t[2]),
        ];
        for (off, w) in corners {
            if w == 0.0 {
                continue;
            }
            let v = &self.data[i0 + off];
            out[0] += w * v[0] as f64;
            out[1] += w * v[1] as f64;
            out[2] += w * v[2] as f64;
        }
        Vector3::new(out[0], out[1], out[2])
    }

    /// `(self ∘ other)(x) = self(x + other(x)) + other(x)`: the displacement
    /// of the map "apply `other`, then `self`".
    pub fn compose(&self, other: &VectorField) -> Result<VectorField> {
        self.check_same_grid(other)?;
        let g = &self.grid;
        let [nx, ny, _] = g.dims();
        let aff = *g.affine();
        let inv = *g.inverse_affine();
        let mut data = vec![[0.0f32; 3]; g.len()];
        data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let ov = other.data[g.index(i, j, k)];
                    let ov = Vector3::new(ov[0] as f64, ov[1] as f64, ov[2] as f64);
                    let x = (aff * Vector4::new(i as f64, j as f64, k as f64, 1.0)).xyz();
                    let q = inv * Vector4::new(x.x + ov.x, x.y + ov.y, x.z + ov.z, 1.0);
                    let s = self.sample_voxel([q.x, q.y, q.z]) + ov;
                    slice[i + nx * j] = [s.x as f32, s.y as f32, s.z as f32];
                }
            }
        });
        Ok(VectorField { grid: g.clone(), data })
    }

    /// Gaussian smoothing of each component, sigma in mm.
    pub fn smoothed(&self, sigma_mm: f64) -> VectorField {
        if sigma_mm <= 0.0 {
            return self.clone();
        }
        let sp = self.grid.spacing();
        let sigma_vox = [0, 1, 2].map(|a| sigma_mm / sp[a]);
        let comps: Vec<Vec<f32>> = (0..3)
            .into_par_iter()
            .map(|c| {
                let buf: Vec<f32> = self.data.iter().map(|v| v[c]).collect();
                smooth_buffer(&buf, self.grid.dims(), sigma_vox)
            })
            .collect();
        let data = (0..self.grid.len()).map(|i| [comps[0][i], comps[1][i], comps[2][i]]).collect();
        VectorField { grid: self.grid.clone(), data }
    }

    /// Trilinear resampling onto another grid (vectors are world-frame, so
    /// no rescaling is needed).
    pub fn resample(&self, target: &Grid) -> VectorField {
        let [nx, ny, _] = target.dims();
        let map = self.grid.inverse_affine() * target.affine();
        let mut data = vec![[0.0f32; 3]; target.len()];
        data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let q = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                    let v = self.sample_voxel([q.x, q.y, q.z]);
                    slice[i + nx * j] = [v.x as f32, v.y as f32, v.z as f32];
                }
            }
        });
        VectorField { grid: target.clone(), data }
    }

    /// Splits into three scalar volumes (x, y, z components).
    pub fn components(&self) -> [Volume3; 3] {
        [0, 1, 2].map(|c| {
            let buf = self.data.iter().map(|v| v[c]).collect();
            Volume3::new(self.grid.clone(), buf).expect("length matches grid")
        })
    }

    pub fn from_components(parts: [&Volume3; 3]) -> Result<VectorField> {
        let grid = parts[0].grid().clone();
        for p in &parts[1..] {
            if !p.grid().same_geometry(&grid, 1e-9) {
                return Err(Error::SpaceMismatch { expected: grid.tag(), found: p.grid().tag() });
            }
        }
        let data = (0..grid.len())
            .map(|i| [parts[0].data()[i], parts[1].data()[i], parts[2].data()[i]])
            .collect();
        VectorField::new(grid, data)
    }
}

#[inline]
fn norm3(v: &[f32; 3]) -> f64 {
    let (a, b, c) = (v[0] as f64, v[1] as f64, v[2] as f64);
    (a * a + b * b + c * c).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::with_spacing([6, 7, 8], [1.0, 1.5, 2.0], [-3.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn constant_fields_compose_additively() {
        let a = VectorField::from_world_fn(grid(), |_| Vector3::new(0.5, -0.25, 1.0));
        let b = VectorField::from_world_fn(grid(), |_| Vector3::new(0.125, 0.5, 0.0));
        let c = a.compose(&b).unwrap();
        assert!(c.data().iter().all(|v| *v == [0.625, 0.25, 1.0]));
    }

    #[test]
    fn affine_fields_sample_exactly() {
        let f = VectorField::from_world_fn(grid(), |p| Vector3::new(0.1 * p.x, 0.2 * p.y - 1.0, p.z));
        let p = Vector3::new(-1.3, 4.2, 9.1);
        let s = f.sample_world(&p);
        assert!((s - Vector3::new(0.1 * p.x, 0.2 * p.y - 1.0, p.z)).norm() < 1e-5);
    }

    #[test]
    fn components_round_trip() {
        let f = VectorField::from_world_fn(grid(), |p| Vector3::new(p.y, p.z, p.x));
        let [x, y, z] = f.components();
        let back = VectorField::from_components([&x, &y, &z]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = VectorField::zeros(grid());
        let b = VectorField::zeros(Grid::with_spacing([6, 7, 8], [1.0; 3], [0.0; 3]).unwrap());
        assert!(matches!(a.add(&b), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn non_finite_rejected() {
        let g = Grid::with_spacing([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        assert!(VectorField::new(g, vec![[f32::NAN, 0.0, 0.0]]).is_err());
    }
}
