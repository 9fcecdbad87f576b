//! Orientation standardisation, isotropic resampling, bias correction and
//! affine pre-alignment to a template.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::affine::{AffineDof, AffineTransform};
use crate::bonestrip::{threshold_mask, StripParams};
use crate::error::{Error, Result};
use crate::register::{affine_register, SimilarityMetric};
use crate::volume::{smooth_buffer, Grid, LabelVolume, SampleMode, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub target_spacing: f64,
    pub bias_correction: bool,
    pub bias_sigma_mm: f64,
    pub bias_max_iters: usize,
    pub bias_tol: f64,
    pub prealign_metric: SimilarityMetric,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            target_spacing: 1.0,
            bias_correction: true,
            bias_sigma_mm: 50.0,
            bias_max_iters: 20,
            bias_tol: 1e-3,
            prealign_metric: SimilarityMetric::MutualInformation,
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("target_spacing", self.target_spacing),
            ("bias_sigma_mm", self.bias_sigma_mm),
            ("bias_tol", self.bias_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.bias_max_iters == 0 {
            return Err(Error::invalid("bias_max_iters must be >= 1"));
        }
        if self.prealign_metric == SimilarityMetric::MeanSquaredDifference {
            return Err(Error::invalid(
                "prealign_metric must be mutual-information or normalized-cross-correlation",
            ));
        }
        Ok(())
    }
}

/// Permutes and flips voxel axes (no interpolation) so that voxel axis `a`
/// points along `+world_a` as closely as possible. World positions of all
/// voxels are unchanged.
pub fn reorient_canonical(vol: &Volume3) -> Result<Volume3> {
    let g = vol.grid();
    let lin = g.linear();
    if lin.determinant().abs() < 1e-12 {
        return Err(Error::invalid("degenerate voxel-to-world affine"));
    }
    // perm[w] = old voxel axis that becomes new axis w
    let mut perm = [usize::MAX; 3];
    let mut used = [false; 3];
    for w in 0..3 {
        let mut best = None;
        for a in 0..3 {
            if used[a] {
                continue;
            }
            let v = lin[(w, a)].abs() / g.spacing()[a];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        let (a, _) = best.expect("three axes");
        perm[w] = a;
        used[a] = true;
    }
    let flip = [0, 1, 2].map(|w| lin[(w, perm[w])] < 0.0);
    if perm == [0, 1, 2] && flip == [false; 3] {
        return Ok(vol.clone());
    }
    let old_dims = g.dims();
    let dims = [0, 1, 2].map(|w| old_dims[perm[w]]);
    let old = g.affine();
    let mut m = Matrix4::identity();
    let mut origin = old.column(3).xyz();
    for w in 0..3 {
        let col = old.column(perm[w]).xyz();
        if flip[w] {
            m.fixed_view_mut::<3, 1>(0, w).copy_from(&(-col));
            origin += col * (old_dims[perm[w]] as f64 - 1.0);
        } else {
            m.fixed_view_mut::<3, 1>(0, w).copy_from(&col);
        }
    }
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&origin);
    let grid = Grid::new(dims, m)?;
    let src = vol.data();
    let mut data = Vec::with_capacity(src.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let n = [i, j, k];
                let mut o = [0usize; 3];
                for w in 0..3 {
                    o[perm[w]] = if flip[w] { dims[w] - 1 - n[w] } else { n[w] };
                }
                data.push(src[g.index(o[0], o[1], o[2])]);
            }
        }
    }
    Volume3::new(grid, data)
}

/// Resamples to isotropic voxels of `spacing` mm with the same axis
/// directions and first voxel position, covering the same extent.
pub fn resample_isotropic(vol: &Volume3, spacing: f64) -> Result<Volume3> {
    if !(spacing > 0.0) {
        return Err(Error::invalid(format!("target spacing must be positive, got {spacing}")));
    }
    let g = vol.grid();
    let sp = g.spacing();
    let old = g.affine();
    let dims = [0, 1, 2].map(|a| (((g.dims()[a] - 1) as f64 * sp[a] / spacing).round() as usize + 1).max(1));
    let mut m = *old;
    for a in 0..3 {
        let col = old.column(a).xyz() * (spacing / sp[a]);
        m.fixed_view_mut::<3, 1>(0, a).copy_from(&col);
    }
    let target = Grid::new(dims, m)?;
    if target.same_geometry(g, 1e-9) {
        return Ok(vol.clone());
    }
    Ok(vol.resample(&target, SampleMode::TRILINEAR_CLAMP))
}

/// Mask-weighted Gaussian smoothing `G(x·m) / G(m)` evaluated on a grid
/// coarsened by an integer `factor` (box-averaged down, trilinear up).
fn masked_smooth(values: &[f64], mask: &[bool], dims: [usize; 3], sigma_vox: f64, factor: usize) -> Vec<f64> {
    let cd = dims.map(|n| n.div_ceil(factor));
    let clen = cd[0] * cd[1] * cd[2];
    let mut num = vec![0.0f32; clen];
    let mut den = vec![0.0f32; clen];
    let mut cnt = vec![0.0f32; clen];
    let [nx, ny, nz] = dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let c = i / factor + cd[0] * (j / factor + cd[1] * (k / factor));
                cnt[c] += 1.0;
                if mask[idx] {
                    num[c] += values[idx] as f32;
                    den[c] += 1.0;
                }
            }
        }
    }
    for c in 0..clen {
        num[c] /= cnt[c];
        den[c] /= cnt[c];
    }
    let s = sigma_vox / factor as f64;
    let sn = smooth_buffer(&num, cd, [s; 3]);
    let sd = smooth_buffer(&den, cd, [s; 3]);
    if factor == 1 {
        return sn
            .iter()
            .zip(&sd)
            .map(|(&a, &b)| if b > 1e-6 { a as f64 / b as f64 } else { 0.0 })
            .collect();
    }
    let half = (factor as f64 - 1.0) / 2.0;
    let mut out = vec![0.0f64; values.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = [i, j, k].map(|v| (v as f64 - half) / factor as f64);
                let a = crate::volume::sample_buffer(&sn, cd, c, SampleMode::TRILINEAR_CLAMP) as f64;
                let b = crate::volume::sample_buffer(&sd, cd, c, SampleMode::TRILINEAR_CLAMP) as f64;
                out[i + nx * (j + ny * k)] = if b > 1e-6 { a / b } else { 0.0 };
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct BiasCorrection {
    pub corrected: Volume3,
    pub bias_field: Volume3,
    pub iterations: usize,
    /// Offset added before taking logs (0 when the masked minimum is >= 1).
    pub shift: f64,
}

/// Iterative homomorphic bias correction inside `mask`.
///
/// Each pass splits the current log image into a smooth part (mask-weighted
/// Gaussian, zero mean over the mask) and a residual; the smooth part is
/// added to the log-bias. Stops once the largest change drops below
/// `bias_tol` or after `bias_max_iters` passes. Voxels outside the mask are
/// returned unchanged.
pub fn correct_bias(vol: &Volume3, mask: &LabelVolume, params: &PreprocessParams) -> Result<BiasCorrection> {
    params.validate()?;
    if !vol.grid().same_geometry(mask.grid(), 1e-6) {
        return Err(Error::SpaceMismatch { expected: vol.grid().tag(), found: mask.grid().tag() });
    }
    let inside: Vec<bool> = mask.data().iter().map(|&l| l != 0).collect();
    let n_in = inside.iter().filter(|&&b| b).count();
    if n_in == 0 {
        return Err(Error::EmptyMask("bias correction mask has no voxels".into()));
    }
    let data = vol.data();
    let min_in = data.iter().zip(&inside).filter(|(_, &m)| m).map(|(&v, _)| v as f64).fold(f64::INFINITY, f64::min);
    let shift = if min_in < 1.0 { 1.0 - min_in } else { 0.0 };
    let shifted: Vec<f64> = data.iter().map(|&v| v as f64 + shift).collect();
    let log_mean = shifted.iter().zip(&inside).filter(|(_, &m)| m).map(|(v, _)| v.ln()).sum::<f64>() / n_in as f64;
    let log_i: Vec<f64> =
        shifted.iter().zip(&inside).map(|(&v, &m)| if m { v.ln() - log_mean } else { 0.0 }).collect();

    let g = vol.grid();
    let sigma_vox = params.bias_sigma_mm / g.min_spacing();
    let factor = ((params.bias_sigma_mm / (4.0 * g.min_spacing())).floor() as usize).max(1);
    let mut log_b = vec![0.0f64; data.len()];
    let mut iterations = 0;
    for _ in 0..params.bias_max_iters {
        iterations += 1;
        let resid: Vec<f64> = log_i.iter().zip(&log_b).map(|(a, b)| a - b).collect();
        let mut smooth = masked_smooth(&resid, &inside, g.dims(), sigma_vox, factor);
        let mean = smooth.iter().zip(&inside).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / n_in as f64;
        let mut change = 0.0f64;
        for (idx, s) in smooth.iter_mut().enumerate() {
            *s -= mean;
            if inside[idx] {
                change = change.max(s.abs());
            }
        }
        for (b, s) in log_b.iter_mut().zip(&smooth) {
            *b += s;
        }
        if change < params.bias_tol {
            break;
        }
    }
    let bias: Vec<f64> = log_b.iter().map(|b| b.exp()).collect();
    let mean_in = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / n_in as f64;
    let before = mean_in(&mut shifted.iter().zip(&inside).filter(|(_, &m)| m).map(|(v, _)| *v));
    let after = mean_in(&mut shifted.iter().zip(&bias).zip(&inside).filter(|(_, &m)| m).map(|((v, b), _)| v / b));
    let k = before / after;
    let corrected: Vec<f32> = shifted
        .iter()
        .zip(&bias)
        .zip(&inside)
        .zip(data)
        .map(|(((v, b), &m), &orig)| if m { (v / b * k - shift) as f32 } else { orig })
        .collect();
    Ok(BiasCorrection {
        corrected: vol.with_data(corrected)?,
        bias_field: vol.with_data(bias.iter().map(|&b| b as f32).collect())?,
        iterations,
        shift,
    })
}

#[derive(Debug, Clone)]
pub struct Prealignment {
    /// Subject resampled onto the template grid.
    pub aligned: Volume3,
    /// Subject world to template world.
    pub transform: AffineTransform,
}

/// 12-parameter affine alignment of `vol` to `template`.
pub fn prealign(vol: &Volume3, template: &Volume3, params: &PreprocessParams) -> Result<Prealignment> {
    params.validate()?;
    let reg = affine_register(vol, template, params.prealign_metric, AffineDof::Full)?;
    let pull = reg.transform.matrix();
    let tg = template.grid();
    let map = vol.grid().inverse_affine() * pull * tg.affine();
    let [nx, ny, nz] = tg.dims();
    let mut data = Vec::with_capacity(tg.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let q = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                data.push(vol.sample_voxel([q.x, q.y, q.z], SampleMode::TRILINEAR_CLAMP));
            }
        }
    }
    Ok(Prealignment { aligned: Volume3::new(tg.clone(), data)?, transform: reg.transform.inverse() })
}

/// Everything the preprocess stage produces.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// Canonical, isotropic, bias-corrected subject in its own world frame.
    pub native: Volume3,
    pub bias_field: Option<Volume3>,
    pub aligned: Volume3,
    /// Subject world to template world.
    pub transform: AffineTransform,
}

/// Reorient, resample to isotropic spacing, correct bias inside the default
/// tissue window (when enabled and the window is nonempty), then pre-align.
pub fn preprocess(vol: &Volume3, template: &Volume3, params: &PreprocessParams) -> Result<Preprocessed> {
    params.validate()?;
    let iso = resample_isotropic(&reorient_canonical(vol)?, params.target_spacing)?;
    let (native, bias_field) = if params.bias_correction {
        let window = StripParams::default();
        let mask = threshold_mask(&iso, window.tissue_low_hu, window.tissue_high_hu)?;
        if mask.count_foreground() == 0 {
            log::warn!("no voxels in the tissue window; skipping bias correction");
            (iso, None)
        } else {
            let b = correct_bias(&iso, &mask, params)?;
            (b.corrected, Some(b.bias_field))
        }
    } else {
        (iso, None)
    };
    let pre = prealign(&native, template, params)?;
    Ok(Preprocessed { native, bias_field, aligned: pre.aligned, transform: pre.transform })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::gaussian_smooth;
    use nalgebra::Vector3;

    fn voxel_world(vol: &Volume3, idx: usize) -> Vector3<f64> {
        let [i, j, k] = vol.grid().coords(idx);
        vol.grid().voxel_to_world([i as f64, j as f64, k as f64])
    }

    fn ramp(grid: Grid) -> Volume3 {
        Volume3::from_world_fn(grid, |p| (p.x + 10.0 * p.y + 100.0 * p.z) as f32)
    }

    fn world_of_values(v: &Volume3) -> Vec<(u32, [i64; 3])> {
        let mut out: Vec<_> = (0..v.data().len())
            .map(|i| {
                let w = voxel_world(v, i);
                (v.data()[i].to_bits(), [w.x, w.y, w.z].map(|c| (c * 1e6).round() as i64))
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn ras_volume_is_fixed_point() {
        let v = ramp(Grid::with_spacing([4, 5, 6], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).unwrap());
        assert_eq!(reorient_canonical(&v).unwrap(), v);
    }

    #[test]
    fn flipped_x_is_reversed() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = -1.0;
        m[(0, 3)] = 10.0;
        let v = ramp(Grid::new([4, 3, 2], m).unwrap());
        let r = reorient_canonical(&v).unwrap();
        assert!(r.grid().affine()[(0, 0)] > 0.0);
        assert_eq!(r.get(0, 0, 0), v.get(3, 0, 0));
        assert_eq!(world_of_values(&r), world_of_values(&v));
        for idx in [0, 5, r.data().len() - 1] {
            let p = voxel_world(&r, idx);
            assert!((r.data()[idx] as f64 - (p.x + 10.0 * p.y + 100.0 * p.z)).abs() < 1e-3);
        }
    }

    #[test]
    fn swapped_axes_recovered() {
        let mut m = Matrix4::zeros();
        m[(1, 0)] = 2.0;
        m[(0, 1)] = -1.0;
        m[(2, 2)] = 1.5;
        m[(3, 3)] = 1.0;
        let v = ramp(Grid::new([3, 4, 5], m).unwrap());
        let r = reorient_canonical(&v).unwrap();
        assert_eq!(r.dims(), [4, 3, 5]);
        let l = r.grid().linear();
        for a in 0..3 {
            assert!(l[(a, a)] > 0.0);
        }
        assert_eq!(world_of_values(&r), world_of_values(&v));
        assert_eq!(reorient_canonical(&r).unwrap(), r);
    }

    #[test]
    fn isotropic_resample_keeps_extent() {
        let g = Grid::with_spacing([5, 5, 3], [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
        let v = ramp(g);
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), [5, 5, 6]);
        assert_eq!(r.spacing(), [1.0; 3]);
        assert!((r.get(2, 3, 4) - (2.0 + 30.0 + 400.0)).abs() < 1e-3);
    }

    fn ball_mask(grid: &Grid, r: f64) -> LabelVolume {
        let c = grid.center();
        let data = (0..grid.len())
            .map(|i| {
                let [a, b, k] = grid.coords(i);
                u32::from((grid.voxel_to_world([a as f64, b as f64, k as f64]) - c).norm() <= r)
            })
            .collect();
        LabelVolume::new(grid.clone(), data).unwrap()
    }

    #[test]
    fn constant_image_needs_no_correction() {
        let g = Grid::centered([20, 20, 20], [2.0; 3]).unwrap();
        let v = Volume3::filled(g.clone(), 40.0);
        let r = correct_bias(&v, &ball_mask(&g, 15.0), &PreprocessParams::default()).unwrap();
        assert!(r.bias_field.data().iter().all(|&b| (b - 1.0).abs() < 1e-3));
        assert!(r.corrected.data().iter().all(|&c| (c - 40.0).abs() < 1e-3));
    }

    #[test]
    fn single_pass_matches_hand_rolled() {
        let g = Grid::centered([16, 16, 16], [1.0; 3]).unwrap();
        let c = g.center();
        let v = Volume3::from_world_fn(g.clone(), move |p| (50.0 + 10.0 * ((p - c).x / 8.0).sin() + 0.5 * p.y) as f32);
        let mask = ball_mask(&g, 7.0);
        let params = PreprocessParams { bias_max_iters: 1, bias_sigma_mm: 3.0, ..Default::default() };
        let r = correct_bias(&v, &mask, &params).unwrap();
        assert_eq!(r.iterations, 1);

        let m: Vec<f32> = mask.data().iter().map(|&l| l as f32).collect();
        let lm: Vec<f32> = v.data().iter().zip(&m).map(|(&x, &w)| (x as f64).ln() as f32 * w).collect();
        let num = gaussian_smooth(&v.with_data(lm).unwrap(), [3.0; 3]).unwrap();
        let den = gaussian_smooth(&v.with_data(m.clone()).unwrap(), [3.0; 3]).unwrap();
        let ratio: Vec<f64> = num.data().iter().zip(den.data()).map(|(&a, &b)| a as f64 / b as f64).collect();
        let n_in = m.iter().filter(|&&w| w > 0.0).count() as f64;
        let mean = ratio.iter().zip(&m).filter(|(_, &w)| w > 0.0).map(|(r, _)| r).sum::<f64>() / n_in;
        let bias: Vec<f64> = ratio.iter().map(|r| (r - mean).exp()).collect();
        for (idx, (&got, want)) in r.bias_field.data().iter().zip(&bias).enumerate() {
            assert!((got as f64 - want).abs() < 1e-4, "voxel {idx}: {got} vs {want}");
        }
    }

    #[test]
    fn empty_mask_is_error() {
        let g = Grid::centered([4, 4, 4], [1.0; 3]).unwrap();
        let v = Volume3::filled(g.clone(), 1.0);
        assert!(matches!(
            correct_bias(&v, &LabelVolume::empty(g), &PreprocessParams::default()),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn msd_rejected_for_prealign() {
        let p = PreprocessParams { prealign_metric: SimilarityMetric::MeanSquaredDifference, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
