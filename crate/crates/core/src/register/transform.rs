//! Chains of world-space maps used for pull-back resampling.

use nalgebra::{Vector3, Vector4};
use rayon::prelude::*;

use crate::affine::AffineTransform;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::volume::{Grid, LabelVolume, SampleMode, Volume3};

#[derive(Debug, Clone)]
pub enum TransformStep {
    Affine(AffineTransform),
    /// `x ↦ x + u(x)`, with `u` sampled trilinearly (clamped at the field's edge).
    Displacement(DisplacementField),
}

impl TransformStep {
    fn map(&self, p: Vector3<f64>) -> Vector3<f64> {
        match self {
            TransformStep::Affine(t) => t.apply(&p),
            TransformStep::Displacement(u) => p + u.sample_world(&p),
        }
    }
}

/// A point map from a named domain space to a named codomain space.
///
/// Steps are stored in the order a point travels through them, so the chain
/// `[a, b]` is the composition `b ∘ a`. Resampling a volume living in the
/// codomain onto a grid in the domain is a pull-back: `out(x) = vol(T(x))`.
#[derive(Debug, Clone)]
pub struct TransformChain {
    domain: String,
    codomain: String,
    steps: Vec<TransformStep>,
}

impl TransformChain {
    pub fn identity(space: &str) -> Self {
        TransformChain { domain: space.to_string(), codomain: space.to_string(), steps: Vec::new() }
    }

    pub fn affine(t: AffineTransform, from: &str, to: &str) -> Self {
        TransformChain { domain: from.into(), codomain: to.into(), steps: vec![TransformStep::Affine(t)] }
    }

    pub fn displacement(u: DisplacementField, from: &str, to: &str) -> Self {
        TransformChain { domain: from.into(), codomain: to.into(), steps: vec![TransformStep::Displacement(u)] }
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn codomain(&self) -> &str {
        &self.codomain
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    /// `next ∘ self`. The next chain must start where this one ends.
    pub fn then(mut self, next: TransformChain) -> Result<Self> {
        if next.domain != self.codomain {
            return Err(Error::SpaceMismatch { expected: self.codomain, found: next.domain });
        }
        self.codomain = next.codomain;
        self.steps.extend(next.steps);
        Ok(self)
    }

    pub fn expect_spaces(&self, domain: &str, codomain: &str) -> Result<()> {
        if self.domain != domain {
            return Err(Error::SpaceMismatch { expected: domain.into(), found: self.domain.clone() });
        }
        if self.codomain != codomain {
            return Err(Error::SpaceMismatch { expected: codomain.into(), found: self.codomain.clone() });
        }
        Ok(())
    }

    pub fn map_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.steps.iter().fold(*p, |q, s| s.map(q))
    }
}

fn pull_back<T, F>(target: &Grid, chain: &TransformChain, f: F) -> Vec<T>
where
    T: Copy + Default + Send,
    F: Fn(&Vector3<f64>) -> T + Sync,
{
    let [nx, ny, _] = target.dims();
    let aff = *target.affine();
    let mut out = vec![T::default(); target.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        for j in 0..ny {
            for i in 0..nx {
                let x = (aff * Vector4::new(i as f64, j as f64, k as f64, 1.0)).xyz();
                slice[i + nx * j] = f(&chain.map_point(&x));
            }
        }
    });
    out
}

/// `out(x) = vol(chain(x))` for every voxel centre `x` of `target`.
pub fn apply_transform(vol: &Volume3, chain: &TransformChain, target: &Grid, mode: SampleMode) -> Volume3 {
    let inv = *vol.grid().inverse_affine();
    let data = pull_back(target, chain, |p| {
        let q = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        vol.sample_voxel([q.x, q.y, q.z], mode)
    });
    Volume3::new(target.clone(), data).expect("target length")
}

/// Nearest-neighbour pull-back of labels; points outside the source grid get 0.
pub fn apply_transform_labels(labels: &LabelVolume, chain: &TransformChain, target: &Grid) -> LabelVolume {
    let data = pull_back(target, chain, |p| labels.sample_world(p));
    LabelVolume::new(target.clone(), data).expect("target length").with_table(labels.table().clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(g: Grid) -> Volume3 {
        Volume3::from_world_fn(g, |p| (2.0 * p.x + 0.5 * p.y - p.z) as f32)
    }

    #[test]
    fn identity_chain_is_resample() {
        let g = Grid::with_spacing([8, 9, 10], [1.0, 1.5, 2.0], [1.0, 2.0, 3.0]).unwrap();
        let v = ramp(g.clone());
        let out = apply_transform(&v, &TransformChain::identity("a"), &g, SampleMode::TRILINEAR);
        let want = v.resample(&g, SampleMode::TRILINEAR);
        assert!(out.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn one_voxel_translation_shifts_ramp() {
        let g = Grid::with_spacing([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let v = ramp(g.clone());
        let chain = TransformChain::affine(AffineTransform::translation([1.0, 0.0, 0.0]), "a", "a");
        let out = apply_transform(&v, &chain, &g, SampleMode::TRILINEAR);
        for k in 1..9 {
            for j in 1..9 {
                for i in 1..8 {
                    assert!((out.get(i, j, k) - v.get(i + 1, j, k)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn mismatched_spaces_rejected() {
        let a = TransformChain::identity("subject");
        let b = TransformChain::identity("template");
        let err = a.clone().then(b).unwrap_err();
        assert!(err.to_string().contains("subject") && err.to_string().contains("template"));
        assert!(a.expect_spaces("subject", "subject").is_ok());
    }

    #[test]
    fn labels_outside_are_background() {
        let g = Grid::with_spacing([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let l = LabelVolume::new(g.clone(), vec![3; 64]).unwrap();
        let chain = TransformChain::affine(AffineTransform::translation([2.0, 0.0, 0.0]), "a", "a");
        let out = apply_transform_labels(&l, &chain, &g);
        assert_eq!(out.get(1, 0, 0), 3);
        assert_eq!(out.get(2, 0, 0), 0);
    }
}
