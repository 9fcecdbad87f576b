//! Image dissimilarity measures evaluated over the overlap region.

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{SampleMode, Volume3};

/// Histogram bins used for mutual information.
pub const MI_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    /// Mean squared difference.
    #[serde(alias = "msd")]
    MeanSquaredDifference,
    /// Global normalised cross-correlation.
    #[serde(alias = "ncc")]
    NormalizedCrossCorrelation,
    /// Mutual information over a hard-binned joint histogram.
    #[serde(alias = "mi")]
    MutualInformation,
}

impl SimilarityMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "msd" | "mean-squared-difference" => Some(SimilarityMetric::MeanSquaredDifference),
            "ncc" | "normalized-cross-correlation" => Some(SimilarityMetric::NormalizedCrossCorrelation),
            "mi" | "mutual-information" => Some(SimilarityMetric::MutualInformation),
            _ => None,
        }
    }
}

/// Result of one metric evaluation. `value` is a dissimilarity: lower is
/// better for every metric (`1 - ncc`, `-mi`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub overlap: usize,
}

/// Precomputed per-image state so repeated evaluations stay cheap.
pub struct MetricContext<'a> {
    pub metric: SimilarityMetric,
    fixed: &'a Volume3,
    moving: &'a Volume3,
    fixed_bins: Vec<u16>,
    moving_range: (f64, f64),
    bins: usize,
}

impl<'a> MetricContext<'a> {
    pub fn new(metric: SimilarityMetric, fixed: &'a Volume3, moving: &'a Volume3) -> Self {
        let bins = MI_BINS;
        let (flo, fhi) = fixed.min_max();
        let (mlo, mhi) = moving.min_max();
        let fixed_bins = if metric == SimilarityMetric::MutualInformation {
            fixed.data().iter().map(|&v| bin_of(v as f64, flo as f64, fhi as f64, bins) as u16).collect()
        } else {
            Vec::new()
        };
        MetricContext { metric, fixed, moving, fixed_bins, moving_range: (mlo as f64, mhi as f64), bins }
    }

    pub fn fixed(&self) -> &Volume3 {
        self.fixed
    }

    /// Evaluates with `map` sending fixed voxel indices to moving voxel
    /// coordinates. Voxels mapped outside the moving grid are ignored.
    pub fn evaluate(&self, map: &Matrix4<f64>) -> MetricValue {
        let [nx, ny, nz] = self.fixed.dims();
        let mdims = self.moving.dims();
        let mode = SampleMode::TRILINEAR_CLAMP;
        let inside = |c: &[f64; 3]| (0..3).all(|a| c[a] >= 0.0 && c[a] <= (mdims[a] - 1) as f64);
        let fdata = self.fixed.data();
        match self.metric {
            SimilarityMetric::MeanSquaredDifference | SimilarityMetric::NormalizedCrossCorrelation => {
                let parts: Vec<[f64; 6]> = (0..nz)
                    .into_par_iter()
                    .map(|k| {
                        let mut acc = [0.0f64; 6];
                        for j in 0..ny {
                            for i in 0..nx {
                                let q = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                                let c = [q.x, q.y, q.z];
                                if !inside(&c) {
                                    continue;
                                }
                                let m = self.moving.sample_voxel(c, mode) as f64;
                                let f = fdata[i + nx * (j + ny * k)] as f64;
                                acc[0] += 1.0;
                                acc[1] += f;
                                acc[2] += m;
                                acc[3] += f * f;
                                acc[4] += m * m;
                                acc[5] += f * m;
                            }
                        }
                        acc
                    })
                    .collect();
                let mut s = [0.0f64; 6];
                for p in &parts {
                    for t in 0..6 {
                        s[t] += p[t];
                    }
                }
                let n = s[0];
                let overlap = n as usize;
                if overlap == 0 {
                    return MetricValue { value: f64::NAN, overlap };
                }
                let value = if self.metric == SimilarityMetric::MeanSquaredDifference {
                    (s[3] - 2.0 * s[5] + s[4]) / n
                } else {
                    let cov = s[5] - s[1] * s[2] / n;
                    let vf = s[3] - s[1] * s[1] / n;
                    let vm = s[4] - s[2] * s[2] / n;
                    if vf <= 0.0 || vm <= 0.0 {
                        1.0
                    } else {
                        1.0 - cov / (vf * vm).sqrt()
                    }
                };
                MetricValue { value, overlap }
            }
            SimilarityMetric::MutualInformation => {
                let b = self.bins;
                let (lo, hi) = self.moving_range;
                let parts: Vec<Vec<u32>> = (0..nz)
                    .into_par_iter()
                    .map(|k| {
                        let mut h = vec![0u32; b * b];
                        for j in 0..ny {
                            for i in 0..nx {
                                let q = map * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                                let c = [q.x, q.y, q.z];
                                if !inside(&c) {
                                    continue;
                                }
                                let m = self.moving.sample_voxel(c, mode) as f64;
                                let fb = self.fixed_bins[i + nx * (j + ny * k)] as usize;
                                h[fb * b + bin_of(m, lo, hi, b)] += 1;
                            }
                        }
                        h
                    })
                    .collect();
                let mut joint = vec![0u64; b * b];
                for p in &parts {
                    for (t, v) in p.iter().enumerate() {
                        joint[t] += *v as u64;
                    }
                }
                let n: u64 = joint.iter().sum();
                if n == 0 {
                    return MetricValue { value: f64::NAN, overlap: 0 };
                }
                MetricValue { value: -mutual_information(&joint, b), overlap: n as usize }
            }
        }
    }
}

#[inline]
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// Mutual information (nats) of a `bins x bins` joint count histogram,
/// rows indexed by the fixed image.
pub fn mutual_information(joint: &[u64], bins: usize) -> f64 {
    let n: f64 = joint.iter().sum::<u64>() as f64;
    let mut pf = vec![0.0f64; bins];
    let mut pm = vec![0.0f64; bins];
    for a in 0..bins {
        for c in 0..bins {
            let p = joint[a * bins + c] as f64 / n;
            pf[a] += p;
            pm[c] += p;
        }
    }
    let mut mi = 0.0;
    for a in 0..bins {
        for c in 0..bins {
            let p = joint[a * bins + c] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (pf[a] * pm[c])).ln();
            }
        }
    }
    mi
}
