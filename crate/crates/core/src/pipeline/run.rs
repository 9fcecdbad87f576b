//! Multi-subject orchestration with resumable, digest-checked stages.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, SubjectSpec};
use super::manifest::{file_digest, path_digest, RunManifest, Stage, StageRecord, StageStatus};
use super::stages::*;
use crate::error::{Error, Result};
use crate::VERSION;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run only these stages (others keep their previous records).
    pub stages: Option<BTreeSet<Stage>>,
    /// Run only these subjects.
    pub subjects: Option<Vec<String>>,
    pub resume: bool,
    /// Overrides `parallel_subjects`.
    pub jobs: Option<usize>,
}

/// Files a stage writes into `<root>/<subject>/<stage>/`.
pub fn stage_outputs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Convert => &["native.nii.gz"],
        Stage::Preprocess => &["pre.nii.gz", "native.nii.gz", "bias_field.nii.gz", "pre_affine.txt"],
        Stage::BoneStrip => &["stripped.nii.gz", "mask.nii.gz", "stripped_native.nii.gz", "mask_native.nii.gz"],
        Stage::Register => &[
            "warped.nii.gz",
            "fwd.nii.gz",
            "fwd.field.txt",
            "inv.nii.gz",
            "inv.field.txt",
            "vel.nii.gz",
            "vel.field.txt",
        ],
        Stage::Segment => &["seg_phys.nii.gz", "seg_norm.nii.gz", "labels.tsv"],
        Stage::WarpStats => &["warp_stats.csv"],
        Stage::GeoMeasures => &["geo_measures.csv"],
    }
}

/// Files a stage reads from upstream stages, as `(stage, file)`.
pub fn stage_inputs(stage: Stage) -> &'static [(Stage, &'static str)] {
    match stage {
        Stage::Convert => &[],
        Stage::Preprocess => &[(Stage::Convert, "native.nii.gz")],
        Stage::BoneStrip => &[(Stage::Preprocess, "pre.nii.gz"), (Stage::Preprocess, "native.nii.gz")],
        Stage::Register => &[(Stage::BoneStrip, "stripped.nii.gz")],
        Stage::Segment => &[
            (Stage::Register, "fwd.nii.gz"),
            (Stage::Register, "fwd.field.txt"),
            (Stage::Register, "inv.nii.gz"),
            (Stage::Register, "inv.field.txt"),
            (Stage::Preprocess, "pre_affine.txt"),
            (Stage::BoneStrip, "stripped_native.nii.gz"),
        ],
        Stage::WarpStats => &[
            (Stage::Register, "fwd.nii.gz"),
            (Stage::Register, "fwd.field.txt"),
            (Stage::Register, "inv.nii.gz"),
            (Stage::Register, "inv.field.txt"),
            (Stage::Preprocess, "pre_affine.txt"),
            (Stage::BoneStrip, "mask.nii.gz"),
            (Stage::BoneStrip, "mask_native.nii.gz"),
        ],
        Stage::GeoMeasures => {
            &[(Stage::Segment, "seg_phys.nii.gz"), (Stage::Segment, "seg_norm.nii.gz"), (Stage::Segment, "labels.tsv")]
        }
    }
}

fn rel(subject: &str, stage: Stage, file: &str) -> String {
    format!("{subject}/{}/{file}", stage.name())
}

/// Digests of files outside the output tree, computed once per run.
struct SharedInputs {
    template: String,
    atlas: String,
    label_table: String,
}

impl SharedInputs {
    fn compute(cfg: &PipelineConfig) -> Result<Self> {
        Ok(SharedInputs {
            template: file_digest(&cfg.template_path)?,
            atlas: file_digest(&cfg.atlas_path)?,
            label_table: match &cfg.label_table_path {
                Some(p) => file_digest(p)?,
                None => String::new(),
            },
        })
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("params serialize")
}

/// Chained parameter digests: each stage hashes its own parameters and
/// external inputs together with the digests of the stages it reads from.
fn param_digests(cfg: &PipelineConfig, subject: &SubjectSpec, shared: &SharedInputs) -> Result<BTreeMap<Stage, String>> {
    let input = path_digest(&subject.input)?;
    let mut out: BTreeMap<Stage, String> = BTreeMap::new();
    for stage in Stage::ALL {
        let own = match stage {
            Stage::Convert => format!("{}|{input}", json(&subject.kind)),
            Stage::Preprocess => format!("{}|{}", json(&cfg.preprocess), shared.template),
            Stage::BoneStrip => json(&cfg.bone_strip),
            Stage::Register => {
                let strip = if cfg.strip_template { json(&cfg.bone_strip) } else { "unstripped".into() };
                format!("{}|{}|{}", json(&cfg.register), shared.template, strip)
            }
            Stage::Segment => format!("{}|{}", shared.atlas, shared.label_table),
            Stage::WarpStats => json(&cfg.quantify),
            Stage::GeoMeasures => String::new(),
        };
        let mut h = Sha256::new();
        for part in [stage.name(), VERSION, &own] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        for up in stage.upstream() {
            h.update(out[up].as_bytes());
            h.update([0]);
        }
        out.insert(stage, hex::encode(h.finalize()));
    }
    Ok(out)
}

fn declared_inputs(cfg: &PipelineConfig, subject: &SubjectSpec, stage: Stage) -> Vec<String> {
    let mut v: Vec<String> = match stage {
        Stage::Convert => vec![subject.input.display().to_string()],
        Stage::Preprocess | Stage::Register => vec![cfg.template_path.display().to_string()],
        Stage::Segment => {
            let mut v = vec![cfg.atlas_path.display().to_string()];
            if let Some(t) = &cfg.label_table_path {
                v.push(t.display().to_string());
            }
            v
        }
        _ => Vec::new(),
    };
    v.extend(stage_inputs(stage).iter().map(|(s, f)| rel(&subject.id, *s, f)));
    v
}

/// Runs one stage, reading declared inputs under `root` and writing every
/// output into `work`. Returns manifest notes.
fn execute(cfg: &PipelineConfig, subject: &SubjectSpec, stage: Stage, root: &Path, work: &Path) -> Result<String> {
    let up = |s: Stage, f: &str| -> PathBuf { root.join(rel(&subject.id, s, f)) };
    let out = |f: &str| work.join(f);
    match stage {
        Stage::Convert => {
            let v = convert_file(&subject.input, subject.kind, &out("native.nii.gz"))?;
            Ok(format!("grid {}", v.grid().tag()))
        }
        Stage::Preprocess => {
            preprocess_file(&up(Stage::Convert, "native.nii.gz"), &cfg.template_path, &cfg.preprocess, &PreprocessOutputs {
                aligned: &out("pre.nii.gz"),
                affine: &out("pre_affine.txt"),
                native: Some(&out("native.nii.gz")),
                bias_field: Some(&out("bias_field.nii.gz")),
            })?;
            Ok(String::new())
        }
        Stage::BoneStrip => {
            let mut w = bone_strip_file(&up(Stage::Preprocess, "pre.nii.gz"), &cfg.bone_strip, &out("stripped.nii.gz"), &out("mask.nii.gz"))?;
            w.extend(bone_strip_file(
                &up(Stage::Preprocess, "native.nii.gz"),
                &cfg.bone_strip,
                &out("stripped_native.nii.gz"),
                &out("mask_native.nii.gz"),
            )?);
            Ok(w.join("; "))
        }
        Stage::Register => register_file(&up(Stage::BoneStrip, "stripped.nii.gz"), &cfg.template_path, &cfg.register, cfg.strip_template.then_some(&cfg.bone_strip), &RegisterOutputs {
            warped: &out("warped.nii.gz"),
            forward: &out("fwd.nii.gz"),
            inverse: &out("inv.nii.gz"),
            velocity: Some(&out("vel.nii.gz")),
        }),
        Stage::Segment => {
            let unknown = segment_file(
                &SegmentInputs {
                    atlas: &cfg.atlas_path,
                    forward: &up(Stage::Register, "fwd.nii.gz"),
                    inverse: &up(Stage::Register, "inv.nii.gz"),
                    affine: &up(Stage::Preprocess, "pre_affine.txt"),
                    native: &up(Stage::BoneStrip, "stripped_native.nii.gz"),
                    label_table: cfg.label_table_path.as_deref(),
                },
                &SegmentOutputs { physical: &out("seg_phys.nii.gz"), normalized: &out("seg_norm.nii.gz"), labels: Some(&out("labels.tsv")) },
            )?;
            let mut notes = "normalized space = template grid".to_string();
            if !unknown.is_empty() {
                notes.push_str(&format!("; labels without a name: {unknown:?}"));
            }
            Ok(notes)
        }
        Stage::WarpStats => {
            let rows = warp_stats_rows(
                &up(Stage::Register, "fwd.nii.gz"),
                &up(Stage::BoneStrip, "mask.nii.gz"),
                Some(&PhysicalWarpInputs {
                    inverse: &up(Stage::Register, "inv.nii.gz"),
                    affine: &up(Stage::Preprocess, "pre_affine.txt"),
                    native_mask: &up(Stage::BoneStrip, "mask_native.nii.gz"),
                }),
                cfg.quantify.bins,
            )?;
            write_warp_stats_file(&subject.id, &rows, &out("warp_stats.csv"))?;
            Ok(format!("jac_entropy_bits = Shannon entropy of the determinant histogram, {} bins over [min, max]", cfg.quantify.bins))
        }
        Stage::GeoMeasures => {
            let rows = geo_measures_rows(
                Some(&up(Stage::Segment, "seg_phys.nii.gz")),
                Some(&up(Stage::Segment, "seg_norm.nii.gz")),
                Some(&up(Stage::Segment, "labels.tsv")),
            )?;
            write_geo_measures_file(&subject.id, &rows, &out("geo_measures.csv"))?;
            Ok(format!("{} rows", rows.len()))
        }
    }
}

/// Executes into `<stage>.partial/` and renames it over `<stage>/`.
fn execute_atomically(cfg: &PipelineConfig, subject: &SubjectSpec, stage: Stage, root: &Path) -> Result<(String, Vec<String>)> {
    let sdir = root.join(&subject.id);
    let final_dir = sdir.join(stage.name());
    let work = sdir.join(format!("{}.partial", stage.name()));
    if work.exists() {
        std::fs::remove_dir_all(&work)?;
    }
    std::fs::create_dir_all(&work)?;
    let notes = match execute(cfg, subject, stage, root, &work) {
        Ok(n) => n,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&work);
            return Err(e);
        }
    };
    for f in stage_outputs(stage) {
        if !work.join(f).is_file() {
            let _ = std::fs::remove_dir_all(&work);
            return Err(Error::invalid(format!("stage {stage} did not produce {f}")));
        }
    }
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir)?;
    }
    std::fs::rename(&work, &final_dir)?;
    let digests = stage_outputs(stage).iter().map(|f| file_digest(&final_dir.join(f))).collect::<Result<_>>()?;
    Ok((notes, digests))
}

struct Shared<'a> {
    manifest: Mutex<RunManifest>,
    path: PathBuf,
    order: Vec<String>,
    root: &'a Path,
}

impl Shared<'_> {
    fn update(&self, f: impl FnOnce(&mut RunManifest)) -> Result<()> {
        let mut m = self.manifest.lock().expect("manifest lock");
        f(&mut m);
        m.sort(&self.order);
        m.save(&self.path)
    }

    fn get(&self, subject: &str, stage: Stage) -> Option<StageRecord> {
        self.manifest.lock().expect("manifest lock").get(subject, stage).cloned()
    }
}

fn record(subject: &str, stage: Stage, status: StageStatus, inputs: Vec<String>, digest: &str, message: String) -> StageRecord {
    StageRecord {
        subject: subject.to_string(),
        stage,
        status,
        inputs,
        outputs: Vec::new(),
        digests: Vec::new(),
        param_digest: digest.to_string(),
        wall_time_s: 0.0,
        version: VERSION.to_string(),
        message,
        notes: String::new(),
    }
}

fn run_subject(cfg: &PipelineConfig, subject: &SubjectSpec, opts: &RunOptions, shared_inputs: &SharedInputs, sh: &Shared) -> Result<()> {
    let selected = |s: Stage| opts.stages.as_ref().is_none_or(|set| set.contains(&s));
    let digests = match param_digests(cfg, subject, shared_inputs) {
        Ok(d) => d,
        Err(e) => {
            let msg = format!("cannot read input {}: {e}", subject.input.display());
            return sh.update(|m| {
                for s in Stage::ALL.into_iter().filter(|&s| selected(s)) {
                    m.upsert(record(&subject.id, s, StageStatus::Failed, declared_inputs(cfg, subject, s), "", msg.clone()));
                }
            });
        }
    };
    let mut failed: BTreeSet<Stage> = BTreeSet::new();
    for stage in Stage::ALL {
        if !selected(stage) {
            continue;
        }
        let start = Instant::now();
        let inputs = declared_inputs(cfg, subject, stage);
        let digest = &digests[&stage];

        let mut blocked = stage
            .upstream()
            .iter()
            .find(|up| failed.contains(up))
            .map(|up| (StageStatus::Skipped, format!("upstream stage `{up}` failed")));
        for &up in stage.upstream().iter().filter(|_| blocked.is_none()) {
            let files: Vec<String> =
                stage_inputs(stage).iter().filter(|(s, _)| *s == up).map(|(_, f)| rel(&subject.id, up, f)).collect();
            let ok = sh.get(&subject.id, up).is_some_and(|r| r.provides(&digests[&up], sh.root, &files));
            if !ok {
                blocked = Some((StageStatus::Failed, format!("upstream stage `{up}` has no current outputs; run it first")));
                break;
            }
        }
        if let Some((status, msg)) = blocked {
            log::warn!("{} {stage}: {msg}", subject.id);
            failed.insert(stage);
            sh.update(|m| m.upsert(record(&subject.id, stage, status, inputs, "", msg)))?;
            continue;
        }

        if opts.resume {
            if let Some(prev) = sh.get(&subject.id, stage) {
                if prev.is_valid_result(digest, sh.root) {
                    log::info!("{} {stage}: up to date", subject.id);
                    let rec = StageRecord {
                        status: StageStatus::Skipped,
                        wall_time_s: start.elapsed().as_secs_f64(),
                        message: "outputs current; not re-run".into(),
                        ..prev
                    };
                    sh.update(|m| m.upsert(rec))?;
                    continue;
                }
            }
        }

        sh.update(|m| m.remove(&subject.id, stage))?;
        log::info!("{} {stage}: running", subject.id);
        let rec = match execute_atomically(cfg, subject, stage, sh.root) {
            Ok((notes, out_digests)) => {
                log::info!("{} {stage}: done in {:.1}s", subject.id, start.elapsed().as_secs_f64());
                StageRecord {
                    outputs: stage_outputs(stage).iter().map(|f| rel(&subject.id, stage, f)).collect(),
                    digests: out_digests,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    notes,
                    ..record(&subject.id, stage, StageStatus::Done, inputs, digest, String::new())
                }
            }
            Err(e) => {
                log::error!("{} {stage}: {e}", subject.id);
                failed.insert(stage);
                StageRecord {
                    wall_time_s: start.elapsed().as_secs_f64(),
                    ..record(&subject.id, stage, StageStatus::Failed, inputs, digest, e.to_string())
                }
            }
        };
        sh.update(|m| m.upsert(rec))?;
    }
    Ok(())
}

/// Runs the selected stages for the selected subjects. Stage failures are
/// recorded in the returned manifest; only pipeline-level problems (such as
/// an unwritable output root) return `Err`.
pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunManifest> {
    let root = &cfg.output_root;
    std::fs::create_dir_all(root)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot create output root {}: {e}", root.display()))))?;
    let subjects: Vec<&SubjectSpec> = match &opts.subjects {
        None => cfg.subjects.iter().collect(),
        Some(ids) => {
            let mut out = Vec::new();
            for id in ids {
                out.push(cfg.subject(id).ok_or_else(|| Error::Config(format!("unknown subject `{id}`")))?);
            }
            out
        }
    };
    let path = root.join(MANIFEST_NAME);
    let manifest = RunManifest::load(&path)?;
    let shared_inputs = SharedInputs::compute(cfg)?;
    let sh = Shared {
        manifest: Mutex::new(manifest),
        path,
        order: cfg.subjects.iter().map(|s| s.id.clone()).collect(),
        root,
    };
    sh.update(|_| {})?;

    let jobs = opts.jobs.unwrap_or(cfg.parallel_subjects).clamp(1, subjects.len().max(1));
    let next = AtomicUsize::new(0);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(subject) = subjects.get(i) else { break };
                if let Err(e) = run_subject(cfg, subject, opts, &shared_inputs, &sh) {
                    first_err.lock().expect("error lock").get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(sh.manifest.into_inner().expect("manifest lock"))
}
