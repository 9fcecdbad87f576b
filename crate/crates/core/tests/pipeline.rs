use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ctatlas::pipeline::*;
use ctatlas::synth::{self, StudyPaths, StudySpec};
use ctatlas::Volume3;

fn small_study(dir: &Path) -> (StudyPaths, PipelineConfig) {
    let spec = StudySpec { n: 32, subjects: 2, dicom_subjects: true, register_iters: Some(vec![20, 10, 5]), ..Default::default() };
    let paths = synth::write_study(dir, &spec).unwrap();
    let cfg = validate_config(&paths.config).unwrap();
    (paths, cfg)
}

fn with_root(cfg: &PipelineConfig, root: &Path) -> PipelineConfig {
    PipelineConfig { output_root: root.to_path_buf(), ..cfg.clone() }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != MANIFEST_NAME {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn status_map(m: &RunManifest) -> BTreeMap<(String, Stage), StageStatus> {
    m.records.iter().map(|r| ((r.subject.clone(), r.stage), r.status)).collect()
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctatlas")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn copy_tree(from: &Path, to: &Path) {
    for (rel, bytes) in files(from) {
        let p = to.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
    std::fs::copy(from.join(MANIFEST_NAME), to.join(MANIFEST_NAME)).unwrap();
}

#[test]
fn full_run_writes_every_declared_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (paths, cfg) = small_study(tmp.path());
    let m = run_pipeline(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(m.records.len(), 2 * Stage::ALL.len());
    assert!(m.records.iter().all(|r| r.status == StageStatus::Done), "{:#?}", m.records);
    for id in &paths.subject_ids {
        for stage in Stage::ALL {
            for f in stage_outputs(stage) {
                assert!(cfg.output_root.join(id).join(stage.name()).join(f).is_file(), "{id}/{stage}/{f}");
            }
        }
    }
    let on_disk = RunManifest::load(&cfg.output_root.join(MANIFEST_NAME)).unwrap();
    assert_eq!(on_disk.to_tsv(), m.to_tsv());
    let seg = m.get("sub-01", Stage::Segment).unwrap();
    assert!(seg.notes.contains("template grid"));
    assert!(m.records.iter().all(|r| r.outputs_verified(&cfg.output_root)));
}

#[test]
fn resume_reruns_only_downstream_of_a_change() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = small_study(tmp.path());
    run_pipeline(&cfg, &RunOptions::default()).unwrap();
    let resume = RunOptions { resume: true, ..Default::default() };

    let m = run_pipeline(&cfg, &resume).unwrap();
    assert!(m.records.iter().all(|r| r.status == StageStatus::Skipped));

    let mut changed = cfg.clone();
    changed.quantify.bins = 32;
    let m = run_pipeline(&changed, &resume).unwrap();
    for ((_, stage), status) in status_map(&m) {
        let expect = if stage == Stage::WarpStats { StageStatus::Done } else { StageStatus::Skipped };
        assert_eq!(status, expect, "{stage}");
    }

    changed.register.sigma_fluid_mm = 2.5;
    let m = run_pipeline(&changed, &resume).unwrap();
    let rerun: BTreeSet<Stage> = m.records.iter().filter(|r| r.status == StageStatus::Done).map(|r| r.stage).collect();
    assert_eq!(rerun, BTreeSet::from([Stage::Register, Stage::Segment, Stage::WarpStats, Stage::GeoMeasures]));
}

#[test]
fn tampered_output_is_recomputed_on_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = small_study(tmp.path());
    run_pipeline(&cfg, &RunOptions::default()).unwrap();
    let before = files(&cfg.output_root);
    let csv = cfg.output_root.join("sub-02/geo-measures/geo_measures.csv");
    std::fs::write(&csv, "tampered").unwrap();
    let m = run_pipeline(&cfg, &RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(m.get("sub-02", Stage::GeoMeasures).unwrap().status, StageStatus::Done);
    assert_eq!(m.get("sub-01", Stage::GeoMeasures).unwrap().status, StageStatus::Skipped);
    assert_eq!(files(&cfg.output_root), before);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = small_study(tmp.path());
    let a = with_root(&cfg, &tmp.path().join("a"));
    let b = PipelineConfig { parallel_subjects: 2, ..with_root(&cfg, &tmp.path().join("b")) };
    run_pipeline(&a, &RunOptions::default()).unwrap();
    run_pipeline(&b, &RunOptions::default()).unwrap();
    let (fa, fb) = (files(&a.output_root), files(&b.output_root));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{} differs", k.display());
    }
}

#[test]
fn each_stage_needs_only_its_declared_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = small_study(tmp.path());
    let opts = RunOptions { subjects: Some(vec!["sub-01".into()]), ..Default::default() };
    run_pipeline(&cfg, &opts).unwrap();
    let reference = files(&cfg.output_root);

    for stage in Stage::ALL {
        let root = tmp.path().join(format!("iso-{}", stage.name()));
        copy_tree(&cfg.output_root, &root);
        let keep: BTreeSet<PathBuf> =
            stage_inputs(stage).iter().map(|(s, f)| Path::new("sub-01").join(s.name()).join(f)).collect();
        for rel in reference.keys() {
            if !keep.contains(rel) {
                std::fs::remove_file(root.join(rel)).unwrap();
            }
        }
        let iso = with_root(&cfg, &root);
        let m = run_pipeline(&iso, &RunOptions { stages: Some(BTreeSet::from([stage])), ..opts.clone() }).unwrap();
        let rec = m.get("sub-01", stage).unwrap();
        assert_eq!(rec.status, StageStatus::Done, "{stage}: {}", rec.message);
        for f in stage_outputs(stage) {
            let rel = Path::new("sub-01").join(stage.name()).join(f);
            assert!(std::fs::read(root.join(&rel)).unwrap() == reference[&rel], "{stage}: {} differs", rel.display());
        }
    }
}

#[test]
fn missing_upstream_fails_and_blocks_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = small_study(tmp.path());
    let m = run_pipeline(&cfg, &RunOptions { stages: Some(BTreeSet::from([Stage::Register, Stage::Segment])), ..Default::default() })
        .unwrap();
    let reg = m.get("sub-01", Stage::Register).unwrap();
    assert_eq!(reg.status, StageStatus::Failed);
    assert!(reg.message.contains("run it first"), "{}", reg.message);
    assert_eq!(m.get("sub-01", Stage::Segment).unwrap().status, StageStatus::Skipped);
    assert!(m.any_failed());
}

#[test]
fn interrupted_run_never_marks_unfinished_stages_done() {
    let tmp = tempfile::tempdir().unwrap();
    let (paths, cfg) = small_study(tmp.path());
    let mut child =
        Command::new(env!("CARGO_BIN_EXE_ctatlas")).args(["--config", paths.config.to_str().unwrap(), "run"]).spawn().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1500));
    let _ = child.kill();
    child.wait().unwrap();

    let m = RunManifest::load(&cfg.output_root.join(MANIFEST_NAME)).unwrap();
    for r in m.records.iter().filter(|r| r.status == StageStatus::Done) {
        assert!(r.outputs_verified(&cfg.output_root), "{} {} marked done without its outputs", r.subject, r.stage);
    }
    let resumed = run_pipeline(&cfg, &RunOptions { resume: true, ..Default::default() }).unwrap();
    assert!(!resumed.any_failed());
    let clean = with_root(&cfg, &tmp.path().join("clean"));
    run_pipeline(&clean, &RunOptions::default()).unwrap();
    let leftovers: Vec<_> = files(&cfg.output_root).into_keys().filter(|k| k.to_string_lossy().contains(".partial")).collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
    assert_eq!(files(&cfg.output_root), files(&clean.output_root));
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (paths, _) = small_study(tmp.path());
    let config = paths.config.to_str().unwrap();

    let ok = bin(&["--config", config, "validate"]);
    assert_eq!(ok.status.code(), Some(0));

    let bad = tmp.path().join("bad.toml");
    let text = std::fs::read_to_string(&paths.config).unwrap();
    let broken = text.replacen("parallel_subjects = 1", "parallel_subjects = 0\nstrip_templat = true", 1).replace("sub-02", "sub-01");
    std::fs::write(&bad, broken).unwrap();
    let out = bin(&["--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("did you mean `strip_template`"), "{err}");
    assert!(err.contains("parallel_subjects"), "{err}");
    assert!(err.contains("duplicate subject id"), "{err}");

    assert_eq!(bin(&["--config", config, "--stages", "registr", "run"]).status.code(), Some(2));
    assert_eq!(bin(&["--config", config, "--subjects", "nobody", "run"]).status.code(), Some(2));
    assert_eq!(bin(&["run"]).status.code(), Some(2));

    let out = bin(&["--config", config, "--stages", "segment", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run it first"));

    // An air-only subject fails at bone-strip; the other subject still completes.
    let air = Volume3::filled(ctatlas::Grid::centered([16; 3], [2.0; 3]).unwrap(), synth::AIR_HU);
    ctatlas::nifti::write_nifti(&air, &tmp.path().join("sub-01.nii.gz"), ctatlas::nifti::Datatype::Float32).unwrap();
    let out = bin(&["--config", config, "run"]);
    assert_eq!(out.status.code(), Some(1));
    let m = RunManifest::load(&paths.output_root.join(MANIFEST_NAME)).unwrap();
    assert_eq!(m.get("sub-01", Stage::BoneStrip).unwrap().status, StageStatus::Failed);
    assert_eq!(m.get("sub-01", Stage::Register).unwrap().status, StageStatus::Skipped);
    assert_eq!(m.get("sub-02", Stage::GeoMeasures).unwrap().status, StageStatus::Done);
}

#[test]
fn print_config_shows_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let (paths, _) = small_study(tmp.path());
    let out = bin(&["--config", paths.config.to_str().unwrap(), "--print-config"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["bias_sigma_mm = 50.0", "tissue_high_hu = 100.0", "sigma_fluid_mm = 2.0", "bins = 64", "strip_template = true"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn single_stage_commands_reproduce_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (paths, cfg) = small_study(tmp.path());
    run_pipeline(&cfg, &RunOptions { subjects: Some(vec!["sub-02".into()]), ..Default::default() }).unwrap();
    let run = cfg.output_root.join("sub-02");
    let d = tmp.path().join("manual");
    std::fs::create_dir_all(&d).unwrap();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let config = paths.config.to_str().unwrap();
    let template = paths.template.to_str().unwrap();
    let dicom = tmp.path().join("sub-02");

    let steps: Vec<Vec<String>> = vec![
        vec!["convert".into(), dicom.to_str().unwrap().into(), "-o".into(), p("native.nii.gz")],
        vec![
            "preprocess".into(),
            p("native.nii.gz"),
            "--template".into(),
            template.into(),
            "-o".into(),
            p("pre.nii.gz"),
            "--affine-out".into(),
            p("pre_affine.txt"),
            "--native-out".into(),
            p("pre_native.nii.gz"),
        ],
        vec!["bone-strip".into(), p("pre.nii.gz"), "-o".into(), p("stripped.nii.gz"), "--mask-out".into(), p("mask.nii.gz")],
        vec![
            "bone-strip".into(),
            p("pre_native.nii.gz"),
            "-o".into(),
            p("stripped_native.nii.gz"),
            "--mask-out".into(),
            p("mask_native.nii.gz"),
        ],
        vec![
            "register".into(),
            p("stripped.nii.gz"),
            "--template".into(),
            template.into(),
            "-o".into(),
            p("warped.nii.gz"),
            "--warp-out".into(),
            p("fwd.nii.gz"),
            "--inv-warp-out".into(),
            p("inv.nii.gz"),
        ],
        vec![
            "segment".into(),
            "--atlas".into(),
            paths.atlas.to_str().unwrap().into(),
            "--warp".into(),
            p("fwd.nii.gz"),
            "--inv-warp".into(),
            p("inv.nii.gz"),
            "--affine".into(),
            p("pre_affine.txt"),
            "--native".into(),
            p("stripped_native.nii.gz"),
            "-o".into(),
            p("seg_phys.nii.gz"),
            "--normalized-out".into(),
            p("seg_norm.nii.gz"),
            "--labels".into(),
            paths.labels.to_str().unwrap().into(),
        ],
        vec![
            "warp-stats".into(),
            "--warp".into(),
            p("fwd.nii.gz"),
            "--mask".into(),
            p("mask.nii.gz"),
            "--inv-warp".into(),
            p("inv.nii.gz"),
            "--affine".into(),
            p("pre_affine.txt"),
            "--native-mask".into(),
            p("mask_native.nii.gz"),
            "--subject".into(),
            "sub-02".into(),
            "-o".into(),
            p("warp_stats.csv"),
        ],
        vec![
            "geo-measures".into(),
            "--physical".into(),
            p("seg_phys.nii.gz"),
            "--normalized".into(),
            p("seg_norm.nii.gz"),
            "--labels".into(),
            paths.labels.to_str().unwrap().into(),
            "--subject".into(),
            "sub-02".into(),
            "-o".into(),
            p("geo_measures.csv"),
        ],
    ];
    for args in &steps {
        let mut full = vec!["--config", config];
        full.extend(args.iter().map(String::as_str));
        let out = bin(&full);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for (stage, manual, produced) in [
        ("convert", "native.nii.gz", "native.nii.gz"),
        ("preprocess", "pre.nii.gz", "pre.nii.gz"),
        ("preprocess", "pre_affine.txt", "pre_affine.txt"),
        ("bone-strip", "stripped.nii.gz", "stripped.nii.gz"),
        ("bone-strip", "mask_native.nii.gz", "mask_native.nii.gz"),
        ("register", "fwd.nii.gz", "fwd.nii.gz"),
        ("register", "inv.field.txt", "inv.field.txt"),
        ("segment", "seg_phys.nii.gz", "seg_phys.nii.gz"),
        ("segment", "seg_norm.nii.gz", "seg_norm.nii.gz"),
        ("warp-stats", "warp_stats.csv", "warp_stats.csv"),
        ("geo-measures", "geo_measures.csv", "geo_measures.csv"),
    ] {
        let a = std::fs::read(d.join(manual)).unwrap();
        let b = std::fs::read(run.join(stage).join(produced)).unwrap();
        assert!(a == b, "{stage}/{produced} differs between CLI and run");
    }
}
