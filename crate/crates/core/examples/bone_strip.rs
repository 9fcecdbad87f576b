//! Strip the bone shell and air from a CT head phantom.
//!
//! ```text
//! cargo run --example bone_strip [out_dir]
//! ```

use std::path::PathBuf;

use ctatlas::bonestrip::{strip, StripParams};
use ctatlas::nifti::{write_labels, write_nifti, Datatype};
use ctatlas::{synth, Grid};

fn main() -> ctatlas::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctatlas-examples"));
    std::fs::create_dir_all(&out)?;

    let grid = Grid::centered([64; 3], [1.0; 3])?;
    let head = synth::textured_head(grid.clone(), 3, 20.0, 3.0);
    let params = StripParams::default();
    let res = strip(&head, &params)?;
    for w in &res.warnings {
        println!("warning: {w}");
    }

    let tissue = head.data().iter().filter(|&&v| v > 0.0 && v < 100.0).count();
    let bone_kept = head.data().iter().zip(res.mask.data()).filter(|(&v, &m)| m != 0 && v == synth::BONE_HU).count();
    println!("tissue voxels {tissue}, mask voxels {}, bone voxels in mask {bone_kept}", res.mask.count_foreground());

    write_nifti(&res.stripped, &out.join("stripped.nii.gz"), Datatype::Float32)?;
    write_labels(&res.mask, &out.join("mask.nii.gz"), Datatype::Uint8)?;
    println!("wrote stripped.nii.gz and mask.nii.gz to {}", out.display());
    Ok(())
}
