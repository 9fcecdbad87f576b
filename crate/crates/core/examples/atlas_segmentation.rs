//! Deform a template by a known map, register the deformed subject back to
//! the template, and pull a five-label atlas onto the subject. Scores each
//! label against the atlas warped by the true map.
//!
//! ```text
//! cargo run --release --example atlas_segmentation
//! ```

use nalgebra::Vector3;

use ctatlas::register::{
    apply_transform, apply_transform_labels, diffeo_register, exp_velocity, DiffeoParams, Direction, TransformChain,
};
use ctatlas::segment::segment;
use ctatlas::{synth, AffineTransform, Grid, LabelTable, LabelVolume, SampleMode};

fn dice(a: &LabelVolume, b: &LabelVolume, l: u32) -> f64 {
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += usize::from(x == l);
        nb += usize::from(y == l);
        both += usize::from(x == l && y == l);
    }
    2.0 * both as f64 / (na + nb) as f64
}

fn main() -> ctatlas::Result<()> {
    let grid = Grid::centered([64; 3], [1.0; 3])?;
    let atlas = synth::five_ball_atlas(grid.clone(), 10.0);
    let template = synth::textured_phantom(grid.clone(), 5);
    let v = synth::gaussian_bump_velocity(grid.clone(), grid.center(), 10.0, Vector3::new(2.5, -1.5, 1.0));
    let (psi, _) = exp_velocity(&v, Direction::Inverse, 0);
    let truth_map = TransformChain::displacement(psi, "subject", "template");
    let subject = apply_transform(&template, &truth_map, &grid, SampleMode::TRILINEAR_CLAMP);
    let truth = apply_transform_labels(&atlas, &truth_map, &grid);

    let reg = diffeo_register(&subject, &template, &AffineTransform::identity(), &DiffeoParams::default())?;
    let table: LabelTable = (1..=5).map(|l| (l, format!("ball_{l}"))).collect();
    let res = segment(&atlas, &reg.diffeo, &AffineTransform::identity(), &grid, &table)?;

    for l in 1..=5 {
        println!("{:<7} Dice {:.4}", table[&l], dice(&truth, &res.labels_physical, l));
    }
    if !res.unknown_labels.is_empty() {
        println!("labels missing from the table: {:?}", res.unknown_labels);
    }
    Ok(())
}
