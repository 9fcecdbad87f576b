//! Warp statistics of a linear expansion and geometric measures of a
//! sphere label, written as CSV.
//!
//! ```text
//! cargo run --example quantify_measures [out_dir]
//! ```

use std::fs::File;
use std::path::PathBuf;

use nalgebra::Vector3;

use ctatlas::quantify::{geo_measures, jacobian_determinant, warp_stats, write_geo_measures_csv, write_warp_stats_csv, Space};
use ctatlas::{synth, Grid, LabelVolume, VectorField};

fn main() -> ctatlas::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctatlas-examples"));
    std::fs::create_dir_all(&out)?;

    let grid = Grid::centered([48; 3], [1.0; 3])?;
    let stretch = VectorField::from_world_fn(grid.clone(), |p| Vector3::new(0.1 * p.x, 0.0, 0.0));
    let jac = jacobian_determinant(&stretch);
    let everywhere = LabelVolume::new(grid.clone(), vec![1; grid.len()])?;
    let stats = warp_stats(&jac, &everywhere, 64)?;
    println!("linear 10% expansion: mean J {:.5}, std {:.2e}", stats.jac_mean, stats.jac_std);

    let ball = synth::ball_atlas(grid.clone(), &[(grid.center(), 15.0)]);
    let table = [(1, "sphere_r15".to_string())].into_iter().collect();
    let rows = geo_measures(&ball, &table, Space::Physical);
    let r = &rows[0];
    let (v, a) = (4.0 / 3.0 * std::f64::consts::PI * 15f64.powi(3), 4.0 * std::f64::consts::PI * 15f64.powi(2));
    println!("sphere r = 15 mm: volume {:.1} (analytic {v:.1}), area {:.1} (analytic {a:.1})", r.volume_mm3, r.surface_area_mm2);

    write_warp_stats_csv(File::create(out.join("warp_stats.csv"))?, &[("demo".into(), Space::Physical, stats)])?;
    write_geo_measures_csv(File::create(out.join("geo_measures.csv"))?, "demo", &rows)?;
    println!("wrote warp_stats.csv and geo_measures.csv to {}", out.display());
    Ok(())
}
