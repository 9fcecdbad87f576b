//! Multiresolution derivative-free affine registration.

use nalgebra::{Matrix4, Vector3};

use super::metric::{MetricContext, MetricValue, SimilarityMetric};
use crate::affine::{AffineDof, AffineParams, AffineTransform};
use crate::error::{Error, Result};
use crate::volume::{build_pyramid, Volume3};

const START_STEPS: [f64; 4] = [5.0, 0.1, 0.05, 0.05];
const MIN_STEPS: [f64; 4] = [0.01, 1e-4, 1e-4, 1e-4];
const MIN_OVERLAP: f64 = 0.01;
const MAX_CYCLES: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineOptions {
    pub metric: SimilarityMetric,
    pub dof: AffineDof,
    pub levels: usize,
}

impl AffineOptions {
    pub fn new(metric: SimilarityMetric, dof: AffineDof) -> Self {
        AffineOptions { metric, dof, levels: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct AffineRegistration {
    /// Pull-back map from fixed world to moving world: the moving image
    /// resampled onto the fixed grid is `moving(transform(x))`.
    pub transform: AffineTransform,
    pub params: AffineParams,
    /// Accepted dissimilarity values per level, coarsest first.
    pub history: Vec<Vec<f64>>,
    /// Dissimilarity at the finest level for the returned transform.
    pub final_value: f64,
    /// Dissimilarity at the finest level for the identity transform.
    pub identity_value: f64,
    pub used_center_of_mass: bool,
}

fn class_of(p: usize) -> usize {
    p / 3
}

fn level_map(ctx_fixed: &Volume3, moving: &Volume3, t: &Matrix4<f64>) -> Matrix4<f64> {
    moving.grid().inverse_affine() * t * ctx_fixed.grid().affine()
}

fn center_of_mass(v: &Volume3) -> Vector3<f64> {
    let (lo, _) = v.min_max();
    let g = v.grid();
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for (idx, &x) in v.data().iter().enumerate() {
        let w = (x - lo) as f64;
        if w > 0.0 {
            let c = g.coords(idx);
            acc += g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]) * w;
            total += w;
        }
    }
    if total > 0.0 {
        acc / total
    } else {
        g.center()
    }
}

struct Level<'a> {
    ctx: MetricContext<'a>,
    moving: &'a Volume3,
}

impl Level<'_> {
    fn eval(&self, params: &AffineParams) -> MetricValue {
        let m = params.to_matrix();
        let map = level_map(self.ctx.fixed(), self.moving, &m);
        self.ctx.evaluate(&map)
    }
}

/// Registers `moving` to `fixed` with the default three pyramid levels.
pub fn affine_register(
    moving: &Volume3,
    fixed: &Volume3,
    metric: SimilarityMetric,
    dof: AffineDof,
) -> Result<AffineRegistration> {
    affine_register_with(moving, fixed, &AffineOptions::new(metric, dof))
}

/// Cyclic coordinate descent over translations, rotations, scales and
/// shears (only those enabled by `dof`), coarse to fine. A trial step is
/// kept only if it strictly lowers the dissimilarity; steps grow by 1.2 on
/// success and halve on failure.
pub fn affine_register_with(moving: &Volume3, fixed: &Volume3, opts: &AffineOptions) -> Result<AffineRegistration> {
    let fixed_pyr = build_pyramid(fixed, opts.levels.max(1));
    let moving_pyr = build_pyramid(moving, fixed_pyr.len());
    let nlev = fixed_pyr.len().min(moving_pyr.len());
    let levels: Vec<Level> = (0..nlev)
        .map(|l| Level { ctx: MetricContext::new(opts.metric, &fixed_pyr[l], &moving_pyr[l]), moving: &moving_pyr[l] })
        .collect();

    let center: [f64; 3] = fixed.grid().center().into();
    let identity = AffineParams::identity(center);
    let fine = &levels[0];
    let nvox = fixed.grid().len() as f64;
    let id_eval = fine.eval(&identity);

    let mut com = identity;
    let shift = center_of_mass(moving) - center_of_mass(fixed);
    com.translation = shift.into();
    let com_eval = fine.eval(&com);

    let ok = |v: &MetricValue| v.overlap as f64 >= MIN_OVERLAP * nvox && v.value.is_finite();
    let (start, used_com) = match (ok(&id_eval), ok(&com_eval)) {
        (true, true) => {
            let coarse = levels.last().unwrap();
            if coarse.eval(&com).value < coarse.eval(&identity).value {
                (com, true)
            } else {
                (identity, false)
            }
        }
        (true, false) => (identity, false),
        (false, true) => (com, true),
        (false, false) => {
            return Err(Error::Registration(format!(
                "images do not overlap (identity overlap {} of {} voxels, also after center-of-mass pre-shift); \
                 check that both volumes share a world frame",
                id_eval.overlap, nvox as usize
            )))
        }
    };

    let active = opts.dof.count();
    let mut params = start.to_vec();
    let mut history = Vec::with_capacity(nlev);
    for (rank, level) in levels.iter().rev().enumerate() {
        let factor = 0.5f64.powi(rank as i32);
        let mut steps: Vec<f64> = (0..active).map(|p| START_STEPS[class_of(p)] * factor).collect();
        let mut current = level.eval(&AffineParams::from_vec(center, &params)).value;
        let mut accepted = vec![current];
        let mut cycles = 0;
        while (0..active).any(|p| steps[p] >= MIN_STEPS[class_of(p)]) && cycles < MAX_CYCLES {
            cycles += 1;
            for p in 0..active {
                if steps[p] < MIN_STEPS[class_of(p)] {
                    continue;
                }
                let mut improved = false;
                for sign in [1.0, -1.0] {
                    let mut trial = params;
                    trial[p] += sign * steps[p];
                    let v = level.eval(&AffineParams::from_vec(center, &trial));
                    if v.value.is_finite() && v.overlap as f64 >= MIN_OVERLAP * level.ctx.fixed().grid().len() as f64 && v.value < current {
                        params = trial;
                        current = v.value;
                        accepted.push(current);
                        improved = true;
                        break;
                    }
                }
                steps[p] *= if improved { 1.2 } else { 0.5 };
            }
        }
        history.push(accepted);
    }

    let mut best = AffineParams::from_vec(center, &params);
    let mut final_value = fine.eval(&best).value;
    if ok(&id_eval) && !(final_value <= id_eval.value) {
        best = identity;
        final_value = id_eval.value;
    }
    Ok(AffineRegistration {
        transform: best.to_transform()?,
        params: best,
        history,
        final_value,
        identity_value: id_eval.value,
        used_center_of_mass: used_com,
    })
}
