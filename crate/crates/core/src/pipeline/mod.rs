//! End-to-end runs over many subjects.
//!
//! Output layout: `<output_root>/<subject>/<stage>/<files>` plus
//! `<output_root>/manifest.tsv`. Each stage writes into a `.partial`
//! directory that is renamed into place only when complete, and the manifest
//! is rewritten (write-then-rename) after every stage.

pub mod config;
pub mod manifest;
pub mod run;
pub mod stages;

pub use config::{parse_config, validate_config, InputKind, PipelineConfig, QuantifyParams, SubjectSpec};
pub use manifest::{RunManifest, Stage, StageRecord, StageStatus};
pub use run::{run_pipeline, stage_inputs, stage_outputs, RunOptions, MANIFEST_NAME};
