//! Declarative run configuration (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bonestrip::StripParams;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessParams;
use crate::quantify::DEFAULT_BINS;
use crate::register::DiffeoParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    DicomDir,
    Nifti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: String,
    pub input: PathBuf,
    pub kind: InputKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantifyParams {
    pub bins: usize,
}

impl Default for QuantifyParams {
    fn default() -> Self {
        QuantifyParams { bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub template_path: PathBuf,
    pub atlas_path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_table_path: Option<PathBuf>,
    pub output_root: PathBuf,
    pub parallel_subjects: usize,
    /// Pass the template through the bone strip before registration.
    pub strip_template: bool,
    pub preprocess: PreprocessParams,
    pub bone_strip: StripParams,
    pub register: DiffeoParams,
    pub quantify: QuantifyParams,
    pub subjects: Vec<SubjectSpec>,
}

impl PipelineConfig {
    /// Fully resolved TOML, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectSpec> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

const TOP_KEYS: [&str; 11] = [
    "template_path",
    "atlas_path",
    "label_table_path",
    "output_root",
    "parallel_subjects",
    "strip_template",
    "preprocess",
    "bone_strip",
    "register",
    "quantify",
    "subjects",
];
const SUBJECT_KEYS: [&str; 3] = ["id", "input", "kind"];

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match Value::try_from(v).expect("params serialize") {
        Value::Table(t) => t.keys().cloned().collect(),
        _ => unreachable!("params serialize to a table"),
    }
}

fn nearest<'a>(key: &str, valid: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    valid.into_iter().min_by_key(|v| strsim::levenshtein(key, v))
}

fn unknown_key(problems: &mut Vec<String>, prefix: &str, key: &str, valid: &[&str]) {
    let full = if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
    match nearest(key, valid.iter().copied()) {
        Some(n) => problems.push(format!("unknown key `{full}` (did you mean `{n}`?)")),
        None => problems.push(format!("unknown key `{full}`")),
    }
}

/// Drops unknown keys from `table`, recording each one.
fn check_keys(problems: &mut Vec<String>, prefix: &str, table: &mut Table, valid: &[&str]) {
    let unknown: Vec<String> = table.keys().filter(|k| !valid.contains(&k.as_str())).cloned().collect();
    for k in unknown {
        unknown_key(problems, prefix, &k, valid);
        table.remove(&k);
    }
}

fn section<T>(problems: &mut Vec<String>, root: &mut Table, name: &str, validate: impl Fn(&T) -> Result<()>) -> T
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let Some(value) = root.remove(name) else {
        return T::default();
    };
    let Value::Table(mut t) = value else {
        problems.push(format!("`{name}` must be a table"));
        return T::default();
    };
    let valid = keys_of(&T::default());
    let valid: Vec<&str> = valid.iter().map(String::as_str).collect();
    check_keys(problems, name, &mut t, &valid);
    match Value::Table(t).try_into::<T>() {
        Ok(v) => {
            if let Err(e) = validate(&v) {
                problems.push(format!("[{name}] {}", e.to_string().trim_start_matches("invalid argument: ")));
            }
            v
        }
        Err(e) => {
            problems.push(format!("[{name}] {}", e.message().trim()));
            T::default()
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

fn path_key(problems: &mut Vec<String>, root: &mut Table, key: &str, base: &Path, required: bool) -> Option<PathBuf> {
    match root.remove(key) {
        Some(Value::String(s)) => Some(resolve(base, &s)),
        Some(_) => {
            problems.push(format!("`{key}` must be a string path"));
            None
        }
        None => {
            if required {
                problems.push(format!("missing required key `{key}`"));
            }
            None
        }
    }
}

pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn subjects(problems: &mut Vec<String>, root: &mut Table, base: &Path) -> Vec<SubjectSpec> {
    let list = match root.remove("subjects") {
        None => {
            problems.push("no subjects configured (add at least one [[subjects]] entry)".into());
            return Vec::new();
        }
        Some(Value::Array(a)) => a,
        Some(_) => {
            problems.push("`subjects` must be an array of tables".into());
            return Vec::new();
        }
    };
    let mut out = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (n, entry) in list.into_iter().enumerate() {
        let prefix = format!("subjects[{n}]");
        let Value::Table(mut t) = entry else {
            problems.push(format!("`{prefix}` must be a table"));
            continue;
        };
        check_keys(problems, &prefix, &mut t, &SUBJECT_KEYS);
        if let Some(Value::String(p)) = t.get("input") {
            t.insert("input".into(), Value::String(resolve(base, p).to_string_lossy().into_owned()));
        }
        let spec: SubjectSpec = match Value::Table(t).try_into() {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("{prefix}: {}", e.message().trim()));
                continue;
            }
        };
        if !is_safe_id(&spec.id) {
            problems.push(format!("{prefix}: subject id `{}` may only contain [A-Za-z0-9._-]", spec.id));
        }
        if let Some(first) = seen.get(&spec.id) {
            problems.push(format!("duplicate subject id `{}` in subjects[{first}] and {prefix}", spec.id));
        } else {
            seen.insert(spec.id.clone(), n);
        }
        let ok = match spec.kind {
            InputKind::DicomDir => spec.input.is_dir(),
            InputKind::Nifti => spec.input.is_file(),
        };
        if !ok {
            let what = if spec.kind == InputKind::DicomDir { "directory" } else { "file" };
            problems.push(format!("{prefix}: input {what} {} does not exist", spec.input.display()));
        }
        out.push(spec);
    }
    out
}

/// Parses and checks a config. Relative paths resolve against `base`.
/// Every problem found is reported in one error.
pub fn parse_config(text: &str, base: &Path) -> Result<PipelineConfig> {
    let mut root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {e}")))?;
    let mut problems = Vec::new();
    check_keys(&mut problems, "", &mut root, &TOP_KEYS);

    let template_path = path_key(&mut problems, &mut root, "template_path", base, true);
    let atlas_path = path_key(&mut problems, &mut root, "atlas_path", base, true);
    let label_table_path = path_key(&mut problems, &mut root, "label_table_path", base, false);
    let output_root = path_key(&mut problems, &mut root, "output_root", base, true);
    for (key, p) in [("template_path", &template_path), ("atlas_path", &atlas_path), ("label_table_path", &label_table_path)] {
        if let Some(p) = p {
            if !p.is_file() {
                problems.push(format!("`{key}` {} does not exist", p.display()));
            }
        }
    }
    let parallel_subjects = match root.remove("parallel_subjects") {
        None => 1,
        Some(Value::Integer(n)) if n >= 1 => n as usize,
        Some(v) => {
            problems.push(format!("`parallel_subjects` must be an integer >= 1, got {v}"));
            1
        }
    };
    let strip_template = match root.remove("strip_template") {
        None => true,
        Some(Value::Boolean(b)) => b,
        Some(v) => {
            problems.push(format!("`strip_template` must be true or false, got {v}"));
            true
        }
    };
    let preprocess = section(&mut problems, &mut root, "preprocess", PreprocessParams::validate);
    let bone_strip = section(&mut problems, &mut root, "bone_strip", StripParams::validate);
    let register = section(&mut problems, &mut root, "register", DiffeoParams::validate);
    let quantify = section(&mut problems, &mut root, "quantify", |q: &QuantifyParams| {
        if q.bins == 0 { Err(Error::invalid("bins must be >= 1")) } else { Ok(()) }
    });
    let subjects = subjects(&mut problems, &mut root, base);

    if !problems.is_empty() {
        let mut msg = format!("{} configuration problem(s):", problems.len());
        for p in &problems {
            msg.push_str("\n  - ");
            msg.push_str(p);
        }
        return Err(Error::Config(msg));
    }
    Ok(PipelineConfig {
        template_path: template_path.expect("checked"),
        atlas_path: atlas_path.expect("checked"),
        label_table_path,
        output_root: output_root.expect("checked"),
        parallel_subjects,
        strip_template,
        preprocess,
        bone_strip,
        register,
        quantify,
        subjects,
    })
}

pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for f in ["tpl.nii.gz", "atlas.nii.gz", "s1.nii.gz", "s2.nii.gz"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        dir
    }

    const MINIMAL: &str = r#"
template_path = "tpl.nii.gz"
atlas_path = "atlas.nii.gz"
output_root = "out"

[[subjects]]
id = "s1"
input = "s1.nii.gz"
kind = "nifti"
"#;

    fn err_text(text: &str, dir: &Path) -> String {
        parse_config(text, dir).unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = fixture();
        let c = parse_config(MINIMAL, dir.path()).unwrap();
        assert_eq!(c.preprocess, PreprocessParams::default());
        assert_eq!(c.register, DiffeoParams::default());
        assert_eq!(c.quantify.bins, 64);
        assert_eq!(c.parallel_subjects, 1);
        assert_eq!(c.subjects[0].input, dir.path().join("s1.nii.gz"));
        let echoed = c.to_toml();
        assert!(echoed.contains("bias_sigma_mm = 50.0"));
        assert!(echoed.contains("iters_per_level = [100, 75, 50]"));
    }

    #[test]
    fn printed_config_reparses_to_itself() {
        let dir = fixture();
        let c = parse_config(MINIMAL, dir.path()).unwrap();
        assert_eq!(parse_config(&c.to_toml(), Path::new("/")).unwrap(), c);
    }

    #[test]
    fn misspelled_key_names_nearest() {
        let dir = fixture();
        let text = format!("{MINIMAL}\n[preprocess]\nbais_sigma_mm = 40.0\n");
        let e = err_text(&text, dir.path());
        assert!(e.contains("preprocess.bais_sigma_mm") && e.contains("did you mean `bias_sigma_mm`"), "{e}");
    }

    #[test]
    fn duplicate_ids_reported_together() {
        let dir = fixture();
        let text = format!("{MINIMAL}\n[[subjects]]\nid = \"s1\"\ninput = \"s2.nii.gz\"\nkind = \"nifti\"\n");
        let e = err_text(&text, dir.path());
        assert!(e.contains("subjects[0]") && e.contains("subjects[1]") && e.contains("`s1`"), "{e}");
    }

    #[test]
    fn all_problems_listed_at_once() {
        let dir = fixture();
        let text = r#"
atlas_path = "missing.nii.gz"
output_root = "out"
colour = 3
[bone_strip]
tissue_low_hu = 200.0
[[subjects]]
id = "bad/id"
input = "s1.nii.gz"
kind = "nifti"
"#;
        let e = err_text(text, dir.path());
        for needle in ["template_path", "missing.nii.gz", "`colour`", "tissue_low_hu", "bad/id"] {
            assert!(e.contains(needle), "{needle} not in {e}");
        }
        assert!(e.starts_with("5 configuration problem(s)"), "{e}");
    }

    #[test]
    fn safe_ids() {
        assert!(is_safe_id("sub-01_a.b"));
        for bad in ["", "..", "a b", "a/b", "é"] {
            assert!(!is_safe_id(bad), "{bad}");
        }
    }
}
