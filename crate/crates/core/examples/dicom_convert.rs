//! Export a phantom as a CT DICOM series, shuffle the file names, and
//! assemble it back into a volume and a NIfTI file.
//!
//! ```text
//! cargo run --example dicom_convert [out_dir]
//! ```

use std::path::PathBuf;

use ctatlas::dicom::{read_dicom_dir, write_series};
use ctatlas::pipeline::stages::convert_file;
use ctatlas::pipeline::InputKind;
use ctatlas::{synth, Grid};

fn main() -> ctatlas::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctatlas-examples"));
    let series = out.join("series");
    let _ = std::fs::remove_dir_all(&series);
    std::fs::create_dir_all(&series)?;

    let grid = Grid::with_spacing([48, 48, 20], [0.8, 0.8, 2.0], [-19.2, -19.2, -20.0])?;
    let head = synth::head_phantom(grid, 14.0, 3.0);
    let files = write_series(&head, &series, "1.2.826.0.1.3680043.9.7", 1.0, -1024.0)?;
    // reverse the names so directory order no longer matches slice order
    for (k, f) in files.iter().enumerate() {
        std::fs::rename(f, series.join(format!("IM{:04}", files.len() - k)))?;
    }
    println!("{} slices in {}", files.len(), series.display());

    let vol = read_dicom_dir(&series)?;
    println!("assembled {}", vol.grid().tag());
    println!("HU identical to source: {}", vol.data() == head.data());

    let nifti = out.join("series.nii.gz");
    convert_file(&series, InputKind::DicomDir, &nifti)?;
    println!("wrote {}", nifti.display());
    Ok(())
}
