//! Write a volume to `.nii.gz`, read it back and compare.
//!
//! ```text
//! cargo run --example nifti_roundtrip [out_dir]
//! ```

use std::path::PathBuf;

use ctatlas::nifti::{read_header, read_nifti, write_nifti, Datatype};
use ctatlas::{synth, Grid};

fn main() -> ctatlas::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctatlas-examples"));
    std::fs::create_dir_all(&out)?;

    let grid = Grid::with_spacing([40, 36, 30], [1.0, 1.0, 2.5], [-20.0, -18.0, -37.5])?;
    let head = synth::head_phantom(grid, 12.0, 3.0);
    let path = out.join("head.nii.gz");
    write_nifti(&head, &path, Datatype::Float32)?;

    let hdr = read_header(&path)?;
    let back = read_nifti(&path)?;
    println!("wrote {}", path.display());
    println!("dims {:?}, pixdim {:?}", &hdr.dim[1..4], &hdr.pixdim[1..4]);
    println!("grid {}", back.grid().tag());
    let same = back.data().iter().zip(head.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let affine_err = (back.grid().affine() - head.grid().affine()).amax();
    println!("data bit-exact: {same}, max affine difference {affine_err:.2e}");
    Ok(())
}
