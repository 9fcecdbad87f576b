//! Diffeomorphic log-demons registration with a stationary velocity field.

use nalgebra::{Matrix3, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exp::{exp_velocity, Direction};
use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::field::{DisplacementField, VectorField};
use crate::quantify::jacobian_determinant;
use crate::volume::{build_pyramid, Grid, SampleMode, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffeoParams {
    pub levels: usize,
    /// Iteration budget per level, coarsest level first.
    pub iters_per_level: Vec<usize>,
    pub sigma_fluid_mm: f64,
    pub sigma_diffusion_mm: f64,
    /// Maximum per-iteration update, as a fraction of the level's minimum
    /// voxel spacing.
    pub step_scale: f64,
    pub ss_min_steps: u32,
    pub converge_tol: f64,
    pub converge_window: usize,
}

impl Default for DiffeoParams {
    fn default() -> Self {
        DiffeoParams {
            levels: 3,
            iters_per_level: vec![100, 75, 50],
            sigma_fluid_mm: 2.0,
            sigma_diffusion_mm: 1.5,
            step_scale: 0.9,
            ss_min_steps: 0,
            converge_tol: 1e-4,
            converge_window: 10,
        }
    }
}

impl DiffeoParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("diffeo levels must be >= 1"));
        }
        if self.iters_per_level.len() != self.levels {
            return Err(Error::invalid(format!(
                "iters_per_level has {} entries but levels = {}",
                self.iters_per_level.len(),
                self.levels
            )));
        }
        for (name, v) in [
            ("sigma_fluid_mm", self.sigma_fluid_mm),
            ("sigma_diffusion_mm", self.sigma_diffusion_mm),
            ("step_scale", self.step_scale),
            ("converge_tol", self.converge_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.converge_window == 0 {
            return Err(Error::invalid("converge_window must be >= 1"));
        }
        Ok(())
    }
}

/// Forward/inverse displacement pair on the fixed grid, plus the velocity
/// they were exponentiated from.
///
/// `forward` maps fixed points into the moving image: the registered moving
/// image is `moving(x + forward(x))`. `inverse` maps the other way.
#[derive(Debug, Clone, PartialEq)]
pub struct Diffeomorphism {
    pub forward: DisplacementField,
    pub inverse: DisplacementField,
    pub velocity: VectorField,
    pub steps: u32,
}

impl Diffeomorphism {
    pub fn identity(grid: Grid) -> Self {
        let z = VectorField::zeros(grid);
        Diffeomorphism { forward: z.clone(), inverse: z.clone(), velocity: z, steps: 0 }
    }

    pub fn from_velocity(velocity: VectorField, min_steps: u32) -> Self {
        let (forward, steps) = exp_velocity(&velocity, Direction::Forward, min_steps);
        let (inverse, _) = exp_velocity(&velocity, Direction::Inverse, min_steps);
        Diffeomorphism { forward, inverse, velocity, steps }
    }

    /// Rebuilds a map from stored displacement fields. The velocity is not
    /// recoverable from them and is left at zero.
    pub fn from_fields(forward: DisplacementField, inverse: DisplacementField) -> Result<Self> {
        if !forward.grid().same_geometry(inverse.grid(), 1e-6) {
            return Err(Error::SpaceMismatch { expected: forward.grid().tag(), found: inverse.grid().tag() });
        }
        let velocity = VectorField::zeros(forward.grid().clone());
        Ok(Diffeomorphism { forward, inverse, velocity, steps: 0 })
    }

    pub fn grid(&self) -> &Grid {
        self.forward.grid()
    }

    /// Max over interior voxels of `|φ⁻¹(φ(x)) - x|` in mm.
    pub fn inverse_consistency(&self) -> f64 {
        self.inverse.compose(&self.forward).expect("same grid").max_norm_interior()
    }

    /// Smallest Jacobian determinant of the forward map over interior voxels.
    pub fn min_interior_jacobian(&self) -> f64 {
        let j = jacobian_determinant(&self.forward);
        let g = j.grid();
        let mut lo = f64::INFINITY;
        for (idx, &v) in j.data().iter().enumerate() {
            let [a, b, c] = g.coords(idx);
            if g.is_interior(a, b, c) {
                lo = lo.min(v as f64);
            }
        }
        lo
    }

    pub fn check_invariants(&self) -> Result<()> {
        let limit = 0.5 * self.grid().min_spacing();
        let ic = self.inverse_consistency();
        if !(ic < limit) {
            return Err(Error::NotDiffeomorphic(format!(
                "inverse consistency {ic:.4} mm exceeds {limit:.4} mm"
            )));
        }
        let jmin = self.min_interior_jacobian();
        if !(jmin > 0.0) {
            return Err(Error::NotDiffeomorphic(format!("Jacobian determinant reaches {jmin:.4}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiffeoRegistration {
    pub diffeo: Diffeomorphism,
    /// Mean squared difference per iteration, one list per level, coarsest first.
    pub history: Vec<Vec<f64>>,
    /// Set when the finest level had to be re-run with stronger smoothing.
    pub retried: bool,
}

/// World-frame intensity gradient, central differences inside.
fn image_gradient(vol: &Volume3) -> VectorField {
    let g = vol.grid().clone();
    let dims = g.dims();
    let [nx, ny, _] = dims;
    let inv_t: Matrix3<f64> = g.linear().try_inverse().expect("invertible grid").transpose();
    let data = vol.data();
    let mut out = vec![[0.0f32; 3]; g.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let c = [i, j, k];
                let mut d = Vector3::zeros();
                for a in 0..3 {
                    let n = dims[a];
                    if n == 1 {
                        continue;
                    }
                    let mut lo = c;
                    let mut hi = c;
                    let span = if c[a] == 0 {
                        hi[a] = 1;
                        1.0
                    } else if c[a] == n - 1 {
                        lo[a] = n - 2;
                        1.0
                    } else {
                        lo[a] -= 1;
                        hi[a] += 1;
                        2.0
                    };
                    let fh = data[hi[0] + nx * (hi[1] + ny * hi[2])] as f64;
                    let fl = data[lo[0] + nx * (lo[1] + ny * lo[2])] as f64;
                    d[a] = (fh - fl) / span;
                }
                let w = inv_t * d;
                slice[i + nx * j] = [w.x as f32, w.y as f32, w.z as f32];
            }
        }
    });
    VectorField::new(g, out).expect("finite gradient")
}

struct LevelInput<'a> {
    fixed: &'a Volume3,
    moving: &'a Volume3,
    iters: usize,
}

fn run_level(level: &LevelInput, mut v: VectorField, p: &DiffeoParams, sigma_diffusion: f64) -> Result<(VectorField, Vec<f64>)> {
    let g = level.fixed.grid().clone();
    let [nx, ny, _] = g.dims();
    let mdims = level.moving.dims();
    let minsp = g.min_spacing();
    let cap = p.step_scale * minsp;
    let sigma2 = minsp * minsp;
    let grad = image_gradient(level.moving);
    let aff = *g.affine();
    let minv = *level.moving.grid().inverse_affine();
    let fdata = level.fixed.data();
    let mut history = Vec::with_capacity(level.iters);

    for _ in 0..level.iters {
        let (u, _) = exp_velocity(&v, Direction::Forward, p.ss_min_steps);
        let mut upd = vec![[0.0f32; 3]; g.len()];
        let sums: Vec<(f64, usize)> = upd
            .par_chunks_mut(nx * ny)
            .enumerate()
            .map(|(k, slice)| {
                let mut sse = 0.0;
                let mut n = 0usize;
                for j in 0..ny {
                    for i in 0..nx {
                        let idx = i + nx * (j + ny * k);
                        let d = u.data()[idx];
                        let x = aff * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                        let q = minv * Vector4::new(x.x + d[0] as f64, x.y + d[1] as f64, x.z + d[2] as f64, 1.0);
                        let c = [q.x, q.y, q.z];
                        if !(0..3).all(|a| c[a] >= 0.0 && c[a] <= (mdims[a] - 1) as f64) {
                            continue;
                        }
                        let w = level.moving.sample_voxel(c, SampleMode::TRILINEAR_CLAMP) as f64;
                        let diff = fdata[idx] as f64 - w;
                        sse += diff * diff;
                        n += 1;
                        let gm = grad.sample_voxel(c);
                        let denom = gm.norm_squared() + diff * diff / sigma2;
                        if denom < 1e-12 {
                            continue;
                        }
                        let mut step = gm * (diff / denom);
                        let len = step.norm();
                        if len > cap {
                            step *= cap / len;
                        }
                        slice[i + nx * j] = [step.x as f32, step.y as f32, step.z as f32];
                    }
                }
                (sse, n)
            })
            .collect();
        let (sse, n) = sums.iter().fold((0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1));
        let msd = sse / n as f64;
        if !msd.is_finite() {
            return Err(Error::Registration("empty overlap between warped moving and fixed image".into()));
        }
        history.push(msd);
        let t = history.len();
        if t > p.converge_window {
            let old = history[t - 1 - p.converge_window];
            if old - msd <= p.converge_tol * old.abs() {
                break;
            }
        }
        let du = VectorField::new(g.clone(), upd)?.smoothed(p.sigma_fluid_mm);
        v = v.add(&du)?.smoothed(sigma_diffusion);
    }
    Ok((v, history))
}

/// Registers `moving` onto `fixed`. `init` is the fixed-to-moving world
/// map used to bring the moving image onto the fixed grid first; the
/// returned fields are relative to that pre-warped image.
pub fn diffeo_register(
    moving: &Volume3,
    fixed: &Volume3,
    init: &AffineTransform,
    params: &DiffeoParams,
) -> Result<DiffeoRegistration> {
    params.validate()?;
    let fg = fixed.grid();
    let pre = fg.affine();
    let to_moving = moving.grid().inverse_affine() * init.matrix() * pre;
    let [nx, ny, _] = fg.dims();
    let mut data = vec![0.0f32; fg.len()];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let q = to_moving * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                slice[i + nx * j] = moving.sample_voxel([q.x, q.y, q.z], SampleMode::TRILINEAR_CLAMP);
            }
        }
    });
    let moved = Volume3::new(fg.clone(), data)?;

    let fixed_pyr = build_pyramid(fixed, params.levels);
    let moving_pyr = build_pyramid(&moved, params.levels);
    let nlev = fixed_pyr.len();
    let skip = params.levels - nlev;
    let iters = &params.iters_per_level[skip..];

    let mut v = VectorField::zeros(fixed_pyr[nlev - 1].grid().clone());
    let mut history = Vec::new();
    let mut before_finest = v.clone();
    for (rank, l) in (0..nlev).rev().enumerate() {
        let grid = fixed_pyr[l].grid();
        if !v.grid().same_geometry(grid, 1e-9) {
            v = v.resample(grid);
        }
        if l == 0 {
            before_finest = v.clone();
        }
        let input = LevelInput { fixed: &fixed_pyr[l], moving: &moving_pyr[l], iters: iters[rank] };
        let (nv, h) = run_level(&input, v, params, params.sigma_diffusion_mm)?;
        v = nv;
        history.push(h);
    }

    let diffeo = Diffeomorphism::from_velocity(v, params.ss_min_steps);
    match diffeo.check_invariants() {
        Ok(()) => Ok(DiffeoRegistration { diffeo, history, retried: false }),
        Err(first) => {
            log::warn!("{first}; re-running finest level with 1.5x velocity smoothing");
            let input = LevelInput { fixed: &fixed_pyr[0], moving: &moving_pyr[0], iters: iters[nlev - 1] };
            let (nv, h) = run_level(&input, before_finest, params, params.sigma_diffusion_mm * 1.5)?;
            *history.last_mut().expect("at least one level") = h;
            let diffeo = Diffeomorphism::from_velocity(nv, params.ss_min_steps);
            diffeo.check_invariants()?;
            Ok(DiffeoRegistration { diffeo, history, retried: true })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(grid: Grid, r: f64) -> Volume3 {
        let c = grid.center();
        Volume3::from_world_fn(grid, move |p| {
            let d = (p - c).norm();
            (100.0 / (1.0 + ((d - r) / 2.0).exp())) as f32
        })
    }

    #[test]
    fn zero_iterations_is_identity() {
        let g = Grid::centered([16, 16, 16], [1.0; 3]).unwrap();
        let f = blob(g.clone(), 5.0);
        let m = blob(g.clone(), 6.0);
        let p = DiffeoParams { iters_per_level: vec![0, 0, 0], ..Default::default() };
        let r = diffeo_register(&m, &f, &AffineTransform::identity(), &p).unwrap();
        assert_eq!(r.diffeo, Diffeomorphism::identity(g));
    }

    #[test]
    fn gradient_of_ramp() {
        let g = Grid::with_spacing([6, 6, 6], [2.0, 1.0, 0.5], [0.0; 3]).unwrap();
        let v = Volume3::from_world_fn(g, |p| (3.0 * p.x - p.y + 2.0 * p.z) as f32);
        let gr = image_gradient(&v);
        assert!(gr.data().iter().all(|d| (d[0] - 3.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4 && (d[2] - 2.0).abs() < 1e-4));
    }

    #[test]
    fn params_validation() {
        assert!(DiffeoParams::default().validate().is_ok());
        let bad = DiffeoParams { iters_per_level: vec![1, 2], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
