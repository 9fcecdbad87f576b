//! Volumetric grids, scalar and label volumes, and interpolation.
//!
//! Voxel data is stored x-fastest: the linear index of voxel `(i, j, k)` is
//! `i + nx * (j + ny * k)`, the same order NIfTI uses on disk.

mod pyramid;
mod smooth;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use pyramid::{build_pyramid, half_resolution_grid, MIN_PYRAMID_DIM};
pub use smooth::{gaussian_kernel, gaussian_smooth, smooth_buffer};

/// Geometry of a voxel lattice: dimensions plus voxel-to-world affine (mm).
#[derive(Clone, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
    inverse: Matrix4<f64>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dims", &self.dims)
            .field("spacing", &self.spacing)
            .field("origin", &self.origin())
            .finish()
    }
}

impl Grid {
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("voxel_to_world contains non-finite entries"));
        }
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into_owned();
        let det = linear.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::invalid("voxel_to_world has a singular 3x3 block"));
        }
        let mut affine = affine;
        affine.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        let inverse = affine
            .try_inverse()
            .ok_or_else(|| Error::invalid("voxel_to_world is not invertible"))?;
        let spacing = [
            linear.column(0).norm(),
            linear.column(1).norm(),
            linear.column(2).norm(),
        ];
        Ok(Grid { dims, spacing, affine, inverse })
    }

    /// Axis-aligned grid with the given spacing whose voxel `(0,0,0)` sits at `origin`.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = spacing[a];
            m[(a, 3)] = origin[a];
        }
        Grid::new(dims, m)
    }

    /// Axis-aligned grid centred on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Grid::with_spacing(dims, spacing, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn inverse_affine(&self) -> &Matrix4<f64> {
        &self.inverse
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.affine.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.affine[(0, 3)], self.affine[(1, 3)], self.affine[(2, 3)]]
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.linear().determinant().abs()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn voxel_to_world(&self, c: [f64; 3]) -> Vector3<f64> {
        (self.affine * Vector4::new(c[0], c[1], c[2], 1.0)).xyz()
    }

    #[inline]
    pub fn world_to_voxel(&self, p: &Vector3<f64>) -> [f64; 3] {
        let v = self.inverse * Vector4::new(p.x, p.y, p.z, 1.0);
        [v.x, v.y, v.z]
    }

    /// World-space centre of the grid's bounding box.
    pub fn center(&self) -> Vector3<f64> {
        self.voxel_to_world([0, 1, 2].map(|a| 0.5 * (self.dims[a] as f64 - 1.0)))
    }

    pub fn is_interior(&self, i: usize, j: usize, k: usize) -> bool {
        let d = self.dims;
        i > 0 && j > 0 && k > 0 && i + 1 < d[0] && j + 1 < d[1] && k + 1 < d[2]
    }

    /// Returns true when both grids have the same dims and their affines
    /// agree entrywise within `tol`.
    pub fn same_geometry(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .affine
                .iter()
                .zip(other.affine.iter())
                .all(|(a, b)| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())))
    }

    /// Stable identifier of the grid geometry, used to tag fields and label
    /// volumes with the space they live in.
    pub fn tag(&self) -> String {
        let mut h = Sha256::new();
        for d in self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for r in 0..3 {
            for c in 0..4 {
                let q = (self.affine[(r, c)] * 1e4).round() as i64;
                h.update(q.to_le_bytes());
            }
        }
        let digest = h.finalize();
        format!(
            "{}x{}x{}@{}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            hex::encode(&digest[..6])
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutOfBounds {
    Constant(f32),
    ClampToEdge,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMode {
    pub interpolation: Interpolation,
    pub out_of_bounds: OutOfBounds,
}

impl SampleMode {
    pub const TRILINEAR: SampleMode = SampleMode {
        interpolation: Interpolation::Trilinear,
        out_of_bounds: OutOfBounds::Constant(0.0),
    };
    pub const NEAREST: SampleMode = SampleMode {
        interpolation: Interpolation::Nearest,
        out_of_bounds: OutOfBounds::Constant(0.0),
    };
    pub const TRILINEAR_CLAMP: SampleMode = SampleMode {
        interpolation: Interpolation::Trilinear,
        out_of_bounds: OutOfBounds::ClampToEdge,
    };

    pub fn new(interpolation: Interpolation, out_of_bounds: OutOfBounds) -> Self {
        SampleMode { interpolation, out_of_bounds }
    }
}

/// Dense 32-bit scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(Volume3 { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        let data = vec![value; grid.len()];
        Volume3 { grid, data }
    }

    /// Builds a volume by evaluating `f` at every voxel's world-space centre.
    pub fn from_world_fn<F>(grid: Grid, f: F) -> Self
    where
        F: Fn(Vector3<f64>) -> f32 + Sync,
    {
        let [nx, ny, _] = grid.dims();
        let mut data = vec![0.0f32; grid.len()];
        data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    slice[i + nx * j] = f(p);
                }
            }
        });
        Volume3 { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map<F: Fn(f32) -> f32 + Sync>(&self, f: F) -> Volume3 {
        Volume3 {
            grid: self.grid.clone(),
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn with_data(&self, data: Vec<f32>) -> Result<Volume3> {
        Volume3::new(self.grid.clone(), data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Samples the volume at a world-space point.
    pub fn sample(&self, world: &Vector3<f64>, mode: SampleMode) -> Result<f32> {
        if !(world.x.is_finite() && world.y.is_finite() && world.z.is_finite()) {
            return Err(Error::invalid("sample point is not finite"));
        }
        Ok(self.sample_voxel(self.grid.world_to_voxel(world), mode))
    }

    /// Samples at a continuous voxel coordinate. Callers guarantee finiteness.
    #[inline]
    pub fn sample_voxel(&self, c: [f64; 3], mode: SampleMode) -> f32 {
        sample_buffer(&self.data, self.grid.dims, c, mode)
    }

    /// Pull-back resampling onto `target`.
    pub fn resample(&self, target: &Grid, mode: SampleMode) -> Volume3 {
        let map = self.grid.inverse * target.affine;
        let [nx, ny, _] = target.dims;
        let mut out = vec![0.0f32; target.len()];
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let v = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                    slice[i + nx * j] = self.sample_voxel([v.x, v.y, v.z], mode);
                }
            }
        });
        Volume3 { grid: target.clone(), data: out }
    }
}

/// Intensity resampling; errors on an empty target grid.
pub fn resample(vol: &Volume3, target: &Grid, mode: SampleMode) -> Result<Volume3> {
    if target.is_empty() {
        return Err(Error::invalid("resample target grid is empty"));
    }
    Ok(vol.resample(target, mode))
}

/// Rounds half away from zero, which `f64::round` already does.
#[inline]
pub(crate) fn round_half_away(x: f64) -> f64 {
    x.round()
}

#[inline]
pub(crate) fn sample_buffer(data: &[f32], dims: [usize; 3], c: [f64; 3], mode: SampleMode) -> f32 {
    let mut c = c;
    let inside = (0..3).all(|a| c[a] >= -1e-9 && c[a] <= dims[a] as f64 - 1.0 + 1e-9);
    match mode.interpolation {
        Interpolation::Nearest => {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let r = round_half_away(c[a]);
                if r < 0.0 || r > (dims[a] - 1) as f64 {
                    match mode.out_of_bounds {
                        OutOfBounds::Constant(v) => return v,
                        OutOfBounds::ClampToEdge => {
                            idx[a] = r.clamp(0.0, (dims[a] - 1) as f64) as usize
                        }
                    }
                } else {
                    idx[a] = r as usize;
                }
            }
            data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])]
        }
        Interpolation::Trilinear => {
            if !inside {
                match mode.out_of_bounds {
                    OutOfBounds::Constant(v) => return v,
                    OutOfBounds::ClampToEdge => {
                        for a in 0..3 {
                            c[a] = c[a].clamp(0.0, (dims[a] - 1) as f64);
                        }
                    }
                }
            }
            trilinear(data, dims, c)
        }
    }
}

#[inline]
fn trilinear(data: &[f32], dims: [usize; 3], c: [f64; 3]) -> f32 {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut step = [0usize; 3];
    for a in 0..3 {
        let x = c[a].clamp(0.0, (dims[a] - 1) as f64);
        let f = x.floor();
        let mut b = f as usize;
        let mut t = x - f;
        if b + 1 >= dims[a] {
            if dims[a] == 1 {
                b = 0;
                t = 0.0;
            } else {
                b = dims[a] - 2;
                t = x - b as f64;
            }
        }
        base[a] = b;
        frac[a] = t;
        step[a] = if dims[a] > 1 { 1 } else { 0 };
    }
    let sx = step[0];
    let sy = dims[0] * step[1];
    let sz = dims[0] * dims[1] * step[2];
    let i0 = base[0] + dims[0] * (base[1] + dims[1] * base[2]);
    let v = |off: usize| data[i0 + off] as f64;
    let [tx, ty, tz] = frac;
    let c00 = v(0) * (1.0 - tx) + v(sx) * tx;
    let c10 = v(sy) * (1.0 - tx) + v(sy + sx) * tx;
    let c01 = v(sz) * (1.0 - tx) + v(sz + sx) * tx;
    let c11 = v(sz + sy) * (1.0 - tx) + v(sz + sy + sx) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    (c0 * (1.0 - tz) + c1 * tz) as f32
}

/// Region names keyed by label value.
pub type LabelTable = BTreeMap<u32, String>;

/// Integer-labelled volume. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    data: Vec<u32>,
    table: LabelTable,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "label data length {} does not match grid of {} voxels",
                data.len(),
                grid.len()
            )));
        }
        Ok(LabelVolume { grid, data, table: LabelTable::new() })
    }

    pub fn empty(grid: Grid) -> Self {
        let data = vec![0; grid.len()];
        LabelVolume { grid, data, table: LabelTable::new() }
    }

    pub fn with_table(mut self, table: LabelTable) -> Self {
        self.table = table;
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u32> {
        self.data
    }

    pub fn table(&self) -> &LabelTable {
        &self.table
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Distinct nonzero labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    /// Float copy of the labels (for smoothing or writing as intensities).
    pub fn to_volume(&self) -> Volume3 {
        Volume3 {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Nearest-neighbour sample at a world point; out-of-grid is background.
    #[inline]
    pub fn sample_world(&self, p: &Vector3<f64>) -> u32 {
        let c = self.grid.world_to_voxel(p);
        self.sample_voxel(c)
    }

    #[inline]
    pub fn sample_voxel(&self, c: [f64; 3]) -> u32 {
        let d = self.grid.dims;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !c[a].is_finite() {
                return 0;
            }
            let r = round_half_away(c[a]);
            if r < 0.0 || r > (d[a] - 1) as f64 {
                return 0;
            }
            idx[a] = r as usize;
        }
        self.data[self.grid.index(idx[0], idx[1], idx[2])]
    }

    /// Nearest-neighbour pull-back onto `target`. Labels never use trilinear
    /// interpolation, so there is no mode argument.
    pub fn resample(&self, target: &Grid) -> LabelVolume {
        let map = self.grid.inverse * target.affine;
        let [nx, ny, _] = target.dims;
        let mut out = vec![0u32; target.len()];
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let v = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                    slice[i + nx * j] = self.sample_voxel([v.x, v.y, v.z]);
                }
            }
        });
        LabelVolume { grid: target.clone(), data: out, table: self.table.clone() }
    }
}
