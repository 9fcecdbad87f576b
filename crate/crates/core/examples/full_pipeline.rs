//! Generate a small two-subject study (one NIfTI, one DICOM series) and run
//! every pipeline stage on it, then resume to show that nothing re-runs.
//!
//! ```text
//! cargo run --release --example full_pipeline [study_dir]
//! ```

use std::path::PathBuf;

use ctatlas::pipeline::{run_pipeline, validate_config, RunOptions, StageStatus};
use ctatlas::synth::{write_study, StudySpec};

fn main() -> ctatlas::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ctatlas-study"));
    let spec = StudySpec { n: 48, subjects: 2, dicom_subjects: true, n_labels: 20, ..Default::default() };
    let paths = write_study(&dir, &spec)?;
    let cfg = validate_config(&paths.config)?;

    let manifest = run_pipeline(&cfg, &RunOptions::default())?;
    for r in &manifest.records {
        println!("{:<7} {:<13} {:<8} {:>7.2}s {}", r.subject, r.stage.name(), r.status.as_str(), r.wall_time_s, r.message);
    }

    let again = run_pipeline(&cfg, &RunOptions { resume: true, ..Default::default() })?;
    let skipped = again.records.iter().filter(|r| r.status == StageStatus::Skipped).count();
    println!("resume: {skipped} of {} stages skipped", again.records.len());
    println!("outputs under {}", cfg.output_root.display());
    Ok(())
}
