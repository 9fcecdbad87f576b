//! `manifest.tsv`: one row per subject × stage.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Convert,
    Preprocess,
    BoneStrip,
    Register,
    Segment,
    WarpStats,
    GeoMeasures,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Convert,
        Stage::Preprocess,
        Stage::BoneStrip,
        Stage::Register,
        Stage::Segment,
        Stage::WarpStats,
        Stage::GeoMeasures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Convert => "convert",
            Stage::Preprocess => "preprocess",
            Stage::BoneStrip => "bone-strip",
            Stage::Register => "register",
            Stage::Segment => "segment",
            Stage::WarpStats => "warp-stats",
            Stage::GeoMeasures => "geo-measures",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Convert => &[],
            Stage::Preprocess => &[Stage::Convert],
            Stage::BoneStrip => &[Stage::Preprocess],
            Stage::Register => &[Stage::BoneStrip],
            Stage::Segment => &[Stage::Preprocess, Stage::BoneStrip, Stage::Register],
            Stage::WarpStats => &[Stage::Preprocess, Stage::BoneStrip, Stage::Register],
            Stage::GeoMeasures => &[Stage::Segment],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let near = Stage::ALL.into_iter().min_by_key(|st| strsim::levenshtein(s, st.name())).expect("stages");
            Error::Config(format!("unknown stage `{s}` (did you mean `{near}`?)"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Done,
    Failed,
    Skipped,
}

impl StageStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StageStatus::Done => "done",
            StageStatus::Failed => "failed",
            StageStatus::Skipped => "skipped",
        }
    }
}

impl FromStr for StageStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "done" => Ok(StageStatus::Done),
            "failed" => Ok(StageStatus::Failed),
            "skipped" => Ok(StageStatus::Skipped),
            _ => Err(Error::Config(format!("unknown stage status `{s}` in manifest"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub subject: String,
    pub stage: Stage,
    pub status: StageStatus,
    pub inputs: Vec<String>,
    /// Relative to the output root.
    pub outputs: Vec<String>,
    /// SHA-256 of each output, same order.
    pub digests: Vec<String>,
    pub param_digest: String,
    pub wall_time_s: f64,
    pub version: String,
    pub message: String,
    /// Stage-specific facts about how outputs were produced.
    pub notes: String,
}

impl StageRecord {
    /// True when every declared output exists under `root` with its recorded
    /// digest. A record without outputs never verifies.
    pub fn outputs_verified(&self, root: &Path) -> bool {
        !self.outputs.is_empty()
            && self.outputs.len() == self.digests.len()
            && self
                .outputs
                .iter()
                .zip(&self.digests)
                .all(|(o, d)| file_digest(&root.join(o)).map(|x| &x == d).unwrap_or(false))
    }

    /// Completed earlier with `param_digest`, every output intact.
    pub fn is_valid_result(&self, param_digest: &str, root: &Path) -> bool {
        self.status != StageStatus::Failed && self.param_digest == param_digest && self.outputs_verified(root)
    }

    /// Completed earlier with `param_digest`, and each of `files` (a subset
    /// of the outputs) intact.
    pub fn provides(&self, param_digest: &str, root: &Path, files: &[String]) -> bool {
        self.status != StageStatus::Failed
            && self.param_digest == param_digest
            && files.iter().all(|f| {
                self.outputs
                    .iter()
                    .position(|o| o == f)
                    .and_then(|i| self.digests.get(i))
                    .is_some_and(|d| file_digest(&root.join(f)).is_ok_and(|x| &x == d))
            })
    }
}

pub const MANIFEST_HEADER: [&str; 11] = [
    "subject",
    "stage",
    "status",
    "inputs",
    "outputs",
    "output_digests",
    "param_digest",
    "wall_time_s",
    "version",
    "message",
    "notes",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub records: Vec<StageRecord>,
}

fn join(v: &[String]) -> String {
    v.join(";")
}

fn split(s: &str) -> Vec<String> {
    if s.is_empty() { Vec::new() } else { s.split(';').map(str::to_string).collect() }
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

impl RunManifest {
    pub fn get(&self, subject: &str, stage: Stage) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.subject == subject && r.stage == stage)
    }

    pub fn upsert(&mut self, rec: StageRecord) {
        self.records.retain(|r| !(r.subject == rec.subject && r.stage == rec.stage));
        self.records.push(rec);
    }

    pub fn remove(&mut self, subject: &str, stage: Stage) {
        self.records.retain(|r| !(r.subject == subject && r.stage == stage));
    }

    pub fn any_failed(&self) -> bool {
        self.records.iter().any(|r| r.status == StageStatus::Failed)
    }

    /// Rows by subject (in `order`, unknown subjects last by name) then stage.
    pub fn sort(&mut self, order: &[String]) {
        let rank = |s: &str| order.iter().position(|o| o == s).unwrap_or(usize::MAX);
        self.records
            .sort_by(|a, b| (rank(&a.subject), &a.subject, a.stage).cmp(&(rank(&b.subject), &b.subject, b.stage)));
    }

    pub fn to_tsv(&self) -> String {
        let mut out = MANIFEST_HEADER.join("\t");
        out.push('\n');
        for r in &self.records {
            let row = [
                r.subject.clone(),
                r.stage.name().to_string(),
                r.status.as_str().to_string(),
                join(&r.inputs),
                join(&r.outputs),
                join(&r.digests),
                r.param_digest.clone(),
                format!("{:.3}", r.wall_time_s),
                r.version.clone(),
                one_line(&r.message),
                one_line(&r.notes),
            ];
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.split('\t').eq(MANIFEST_HEADER.iter().copied()) => {}
            _ => return Err(Error::Config("manifest header does not match".into())),
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != MANIFEST_HEADER.len() {
                return Err(Error::Config(format!("manifest row {} has {} fields", n + 2, f.len())));
            }
            records.push(StageRecord {
                subject: f[0].to_string(),
                stage: f[1].parse()?,
                status: f[2].parse()?,
                inputs: split(f[3]),
                outputs: split(f[4]),
                digests: split(f[5]),
                param_digest: f[6].to_string(),
                wall_time_s: f[7].parse().unwrap_or(0.0),
                version: f[8].to_string(),
                message: f[9].to_string(),
                notes: f[10].to_string(),
            });
        }
        Ok(RunManifest { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        Self::parse_tsv(&std::fs::read_to_string(path)?)
    }

    /// Write-then-rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tsv.tmp");
        {
            let mut f = BufWriter::new(File::create(&tmp)?);
            f.write_all(self.to_tsv().as_bytes())?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digest of a file, or of every regular file in a directory (sorted by name).
pub fn path_digest(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return file_digest(path);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.file_name().unwrap_or_default().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(file_digest(&e)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, stage: Stage) -> StageRecord {
        StageRecord {
            subject: subject.into(),
            stage,
            status: StageStatus::Done,
            inputs: vec!["/in/a.nii".into()],
            outputs: vec!["s/convert/native.nii.gz".into()],
            digests: vec!["ab".into()],
            param_digest: "cd".into(),
            wall_time_s: 1.25,
            version: "0.1.0".into(),
            message: "a\tb".into(),
            notes: String::new(),
        }
    }

    #[test]
    fn tsv_round_trip() {
        let mut m = RunManifest::default();
        m.upsert(rec("b", Stage::Register));
        m.upsert(rec("a", Stage::Convert));
        m.upsert(rec("b", Stage::Convert));
        m.sort(&["b".into(), "a".into()]);
        assert_eq!(m.records.iter().map(|r| (r.subject.as_str(), r.stage)).collect::<Vec<_>>(), [
            ("b", Stage::Convert),
            ("b", Stage::Register),
            ("a", Stage::Convert)
        ]);
        let back = RunManifest::parse_tsv(&m.to_tsv()).unwrap();
        assert_eq!(back.records[0].message, "a b");
        assert_eq!(back.records[1].outputs, m.records[1].outputs);
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bonestrip".parse::<Stage>().unwrap_err().to_string().contains("bone-strip"));
    }

    #[test]
    fn verification_needs_matching_digest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f"), b"hello").unwrap();
        let mut r = rec("s", Stage::Convert);
        r.outputs = vec!["f".into()];
        r.digests = vec![hex_digest(b"hello")];
        assert!(r.outputs_verified(dir.path()));
        std::fs::write(dir.path().join("f"), b"hellO").unwrap();
        assert!(!r.outputs_verified(dir.path()));
    }
}
