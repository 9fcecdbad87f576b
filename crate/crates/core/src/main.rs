use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctatlas::bonestrip::StripParams;
use ctatlas::pipeline::stages::*;
use ctatlas::pipeline::{run_pipeline, validate_config, InputKind, PipelineConfig, RunOptions, Stage, StageStatus};
use ctatlas::preprocess::PreprocessParams;
use ctatlas::quantify::DEFAULT_BINS;
use ctatlas::register::DiffeoParams;
use ctatlas::Error;

#[derive(Parser)]
#[command(name = "ctatlas", version, about = "CT atlas registration, segmentation and quantification")]
struct Cli {
    /// Pipeline config (TOML). Single-stage commands take their parameters from it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated subject ids to run.
    #[arg(long, global = true, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    /// Comma-separated stage names to run.
    #[arg(long, global = true, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Skip stages whose outputs and parameter digests are current.
    #[arg(long, global = true)]
    resume: bool,
    /// Subjects processed concurrently (overrides parallel_subjects).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// DICOM series directory or NIfTI file to float32 NIfTI.
    Convert {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Reorient, resample, bias-correct and pre-align to a template.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        affine_out: PathBuf,
        /// Bias-corrected subject in its own (canonical, isotropic) frame.
        #[arg(long)]
        native_out: Option<PathBuf>,
        #[arg(long)]
        bias_out: Option<PathBuf>,
    },
    /// Mask out bone and background.
    BoneStrip {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        mask_out: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        low: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        high: Option<f64>,
    },
    /// Diffeomorphic registration of a pre-aligned subject to the template.
    Register {
        input: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        warp_out: PathBuf,
        #[arg(long)]
        inv_warp_out: PathBuf,
        #[arg(long)]
        velocity_out: Option<PathBuf>,
        /// Bone-strip the template first (implied by a config with strip_template).
        #[arg(long)]
        strip_template: bool,
    },
    /// Pull atlas labels back into normalized and physical subject space.
    Segment {
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        warp: PathBuf,
        #[arg(long)]
        inv_warp: PathBuf,
        #[arg(long)]
        affine: PathBuf,
        #[arg(long)]
        native: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        normalized_out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Jacobian statistics of the registration (CSV).
    WarpStats {
        #[arg(long)]
        warp: PathBuf,
        /// Mask on the template grid.
        #[arg(long)]
        mask: PathBuf,
        /// With --affine and --native-mask, adds the physical-space row.
        #[arg(long)]
        inv_warp: Option<PathBuf>,
        #[arg(long)]
        affine: Option<PathBuf>,
        #[arg(long)]
        native_mask: Option<PathBuf>,
        #[arg(long, default_value = "subject")]
        subject: String,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-region volume, surface area and centroid (CSV).
    GeoMeasures {
        #[arg(long)]
        physical: Option<PathBuf>,
        #[arg(long)]
        normalized: Option<PathBuf>,
        /// Label table; its entries fix the rows emitted.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "subject")]
        subject: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the configured pipeline.
    Run,
    /// Check the config and report every problem.
    Validate,
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<PipelineConfig>, Failure> {
    match &cli.config {
        Some(p) => Ok(Some(validate_config(p)?)),
        None => Ok(None),
    }
}

fn require_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    load_config(cli)?.ok_or_else(|| Failure::Config("this command needs --config".into()))
}

fn input_kind(p: &Path) -> InputKind {
    if p.is_dir() { InputKind::DicomDir } else { InputKind::Nifti }
}

fn run(cli: &Cli) -> Result<ExitCode, Failure> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        let c = cfg.as_ref().ok_or_else(|| Failure::Config("--print-config needs --config".into()))?;
        print!("{}", c.to_toml());
        if cli.command.is_none() {
            return Ok(ExitCode::SUCCESS);
        }
    }
    let pre = cfg.as_ref().map(|c| c.preprocess.clone()).unwrap_or_else(PreprocessParams::default);
    let strip = cfg.as_ref().map(|c| c.bone_strip.clone()).unwrap_or_else(StripParams::default);
    let diffeo = cfg.as_ref().map(|c| c.register.clone()).unwrap_or_else(DiffeoParams::default);
    let bins = cfg.as_ref().map_or(DEFAULT_BINS, |c| c.quantify.bins);

    let Some(command) = &cli.command else {
        return Err(Failure::Config("no command given; see --help".into()));
    };
    match command {
        Command::Convert { input, output } => {
            let v = convert_file(input, input_kind(input), output)?;
            log::info!("wrote {} ({})", output.display(), v.grid().tag());
        }
        Command::Preprocess { input, template, output, affine_out, native_out, bias_out } => {
            preprocess_file(input, template, &pre, &PreprocessOutputs {
                aligned: output,
                affine: affine_out,
                native: native_out.as_deref(),
                bias_field: bias_out.as_deref(),
            })?;
        }
        Command::BoneStrip { input, output, mask_out, low, high } => {
            let mut p = strip;
            if let Some(l) = low {
                p.tissue_low_hu = *l;
            }
            if let Some(h) = high {
                p.tissue_high_hu = *h;
            }
            bone_strip_file(input, &p, output, mask_out)?;
        }
        Command::Register { input, template, output, warp_out, inv_warp_out, velocity_out, strip_template } => {
            let strip_tpl = *strip_template || cfg.as_ref().is_some_and(|c| c.strip_template);
            let summary = register_file(input, template, &diffeo, strip_tpl.then_some(&strip), &RegisterOutputs {
                warped: output,
                forward: warp_out,
                inverse: inv_warp_out,
                velocity: velocity_out.as_deref(),
            })?;
            log::info!("{summary}");
        }
        Command::Segment { atlas, warp, inv_warp, affine, native, output, normalized_out, labels } => {
            let unknown = segment_file(
                &SegmentInputs { atlas, forward: warp, inverse: inv_warp, affine, native, label_table: labels.as_deref() },
                &SegmentOutputs { physical: output, normalized: normalized_out, labels: None },
            )?;
            if !unknown.is_empty() {
                log::warn!("labels without a table entry: {unknown:?}");
            }
        }
        Command::WarpStats { warp, mask, inv_warp, affine, native_mask, subject, bins: b, output } => {
            let physical = match (inv_warp, affine, native_mask) {
                (Some(i), Some(a), Some(n)) => Some(PhysicalWarpInputs { inverse: i, affine: a, native_mask: n }),
                (None, None, None) => None,
                _ => return Err(Failure::Config("--inv-warp, --affine and --native-mask go together".into())),
            };
            let rows = warp_stats_rows(warp, mask, physical.as_ref(), b.unwrap_or(bins))?;
            write_warp_stats_file(subject, &rows, output)?;
        }
        Command::GeoMeasures { physical, normalized, labels, subject, output } => {
            if physical.is_none() && normalized.is_none() {
                return Err(Failure::Config("give --physical and/or --normalized".into()));
            }
            let rows = geo_measures_rows(physical.as_deref(), normalized.as_deref(), labels.as_deref())?;
            write_geo_measures_file(subject, &rows, output)?;
        }
        Command::Validate => {
            let c = require_config(cli)?;
            println!("config ok: {} subject(s)", c.subjects.len());
        }
        Command::Run => {
            let c = require_config(cli)?;
            let stages = match &cli.stages {
                None => None,
                Some(names) => Some(names.iter().map(|n| n.parse::<Stage>()).collect::<Result<BTreeSet<_>, _>>()?),
            };
            let opts = RunOptions { stages, subjects: cli.subjects.clone(), resume: cli.resume, jobs: cli.jobs };
            let manifest = run_pipeline(&c, &opts)?;
            let failed: Vec<String> = manifest
                .records
                .iter()
                .filter(|r| r.status == StageStatus::Failed)
                .map(|r| format!("{} {}: {}", r.subject, r.stage, r.message))
                .collect();
            if !failed.is_empty() {
                for f in &failed {
                    eprintln!("failed: {f}");
                }
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
