use rayon::prelude::*;

use super::Volume3;
use crate::error::{Error, Result};

/// Normalised Gaussian taps for `sigma` voxels, truncated at 3 sigma.
/// Returns `[1.0]` for a zero sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian smoothing of a raw x-fastest buffer, per-axis sigma in
/// voxels, clamp-to-edge borders.
pub fn smooth_buffer(data: &[f32], dims: [usize; 3], sigma_vox: [f64; 3]) -> Vec<f32> {
    let mut cur: Option<Vec<f32>> = None;
    for axis in 0..3 {
        if sigma_vox[axis] <= 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma_vox[axis]);
        let src = cur.as_deref().unwrap_or(data);
        cur = Some(convolve_axis(src, dims, axis, &kernel));
    }
    cur.unwrap_or_else(|| data.to_vec())
}

fn convolve_axis(src: &[f32], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let radius = (kernel.len() / 2) as isize;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis] as isize;
    let mut out = vec![0.0f32; src.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [i, j, k][axis] as isize;
                let base = i + nx * (j + ny * k) - (pos as usize) * stride;
                let mut acc = 0.0f64;
                for (t, w) in kernel.iter().enumerate() {
                    let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
                    acc += w * src[base + q * stride] as f64;
                }
                slice[i + nx * j] = acc as f32;
            }
        }
    });
    let _ = nz;
    out
}

/// Gaussian smoothing with per-axis sigma in millimetres.
pub fn gaussian_smooth(vol: &Volume3, sigma_mm: [f64; 3]) -> Result<Volume3> {
    if sigma_mm.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma_mm:?}")));
    }
    let sp = vol.spacing();
    let sigma_vox = [0, 1, 2].map(|a| sigma_mm[a] / sp[a]);
    let data = smooth_buffer(vol.data(), vol.dims(), sigma_vox);
    vol.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let g = Grid::with_spacing([4, 5, 6], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let data: Vec<f32> = (0..g.len()).map(|x| (x as f32 * 0.37).sin()).collect();
        let v = Volume3::new(g, data).unwrap();
        let s = gaussian_smooth(&v, [0.0; 3]).unwrap();
        assert_eq!(s.data(), v.data());
    }

    #[test]
    fn constant_is_preserved() {
        let g = Grid::with_spacing([9, 9, 9], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3::filled(g, 12.5);
        let s = gaussian_smooth(&v, [2.0, 1.0, 3.5]).unwrap();
        assert!(s.data().iter().all(|&x| (x - 12.5).abs() < 1e-4));
    }

    #[test]
    fn impulse_response_is_outer_product_of_kernels() {
        let n = 21;
        let g = Grid::with_spacing([n, n, n], [1.0; 3], [0.0; 3]).unwrap();
        let mut data = vec![0.0f32; g.len()];
        data[g.index(10, 10, 10)] = 1.0;
        let v = Volume3::new(g.clone(), data).unwrap();
        let s = gaussian_smooth(&v, [2.0; 3]).unwrap();
        // independent kernel: truncated at 3 sigma = 6 taps each side
        let raw: Vec<f64> = (-6..=6).map(|x: i32| (-(x * x) as f64 / 8.0).exp()).collect();
        let sum: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let off = |c: usize| c as i32 - 10;
                    let tap = |o: i32| if o.abs() <= 6 { w[(o + 6) as usize] } else { 0.0 };
                    let want = tap(off(i)) * tap(off(j)) * tap(off(k));
                    assert!((s.get(i, j, k) as f64 - want).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        let g = Grid::with_spacing([3, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
        assert!(gaussian_smooth(&Volume3::filled(g, 0.0), [-1.0, 0.0, 0.0]).is_err());
    }
}
