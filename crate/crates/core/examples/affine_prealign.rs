//! Recover a known rigid pose and an isotropic scale with the affine
//! registration used for pre-alignment.
//!
//! ```text
//! cargo run --release --example affine_prealign
//! ```

use ctatlas::register::{affine_register, apply_transform, SimilarityMetric, TransformChain};
use ctatlas::{synth, AffineDof, AffineParams, Grid, SampleMode};

fn main() -> ctatlas::Result<()> {
    let grid = Grid::centered([64; 3], [1.0; 3])?;
    let fixed = synth::two_sphere_phantom(grid.clone());
    let c: [f64; 3] = grid.center().into();

    let truth = AffineParams {
        rotation: [0.0, 0.0, 5f64.to_radians()],
        translation: [10.0, 0.0, 0.0],
        ..AffineParams::identity(c)
    };
    let scale = AffineParams { scale: [1.1; 3], ..AffineParams::identity(c) };
    let cases = [("rigid 5 deg + 10 mm", truth, AffineDof::Rigid), ("scale 1.1", scale, AffineDof::Similarity)];

    for (name, p, dof) in cases {
        // moving(x) = fixed(T⁻¹ x), so the pull-back the registration finds is T
        let t = p.to_transform()?;
        let chain = TransformChain::affine(t.inverse(), "moving", "fixed");
        let moving = apply_transform(&fixed, &chain, &grid, SampleMode::TRILINEAR);
        let reg = affine_register(&moving, &fixed, SimilarityMetric::MutualInformation, dof)?;
        let r = &reg.params;
        println!("{name}:");
        println!("  rotation (deg) {:?}", r.rotation.map(|a| (a.to_degrees() * 1000.0).round() / 1000.0));
        println!("  translation    {:?}", r.translation.map(|a| (a * 1000.0).round() / 1000.0));
        println!("  scale          {:?}", r.scale.map(|a| (a * 10000.0).round() / 10000.0));
        println!("  dissimilarity  {:.4} (identity {:.4})", reg.final_value, reg.identity_value);
    }
    Ok(())
}
