//! Configuration files, run directories, checkpoints, report files and data
//! loading for the command-line tool.

pub mod cli;
pub mod figures;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, hide_labels, load_dataset_dir, load_split, DatasetSplit, FilenameLayout,
    SplitRole,
};
use crate::embedding::ModelState;
use crate::error::{Error, Result};
use crate::training::{
    Composition, DataRef, EpochReport, ExperimentConfig, PretrainState, TargetData,
};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "REID_RUN_ROOT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORTS_FILE: &str = "epoch_reports.jsonl";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_steps.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FIGURE_DIR: &str = "figures";

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Parses and validates a config. Unknown keys are rejected.
pub fn config_from_toml(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hex SHA-256 of the canonical serialization plus the code version.
pub fn config_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(CODE_VERSION.as_bytes());
    h.update([0]);
    h.update(config_to_toml(cfg)?.as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn parse_override_value(raw: &str) -> toml::Value {
    // anything that is not a TOML literal is taken as a bare string
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a config tree. The key must
/// already exist unless its parent table does, so typos fail loudly when the
/// result is deserialized.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{assignment}` is not of the form key=value"
        ))
    })?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(
        path[path.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

/// Loads a config file (or the built-in toy config) and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => config_to_toml(&ExperimentConfig::toy())?,
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    config_from_toml(&text)
}

/// Written next to every run's config snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_fingerprint: String,
}

/// A directory owned by one run. Files are only ever added.
#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory; refuses to reuse one that has content.
    pub fn create(path: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        if path.exists() && fs::read_dir(path)?.next().is_some() {
            return Err(Error::invalid(format!(
                "run directory {} already has content",
                path.display()
            )));
        }
        fs::create_dir_all(path.join(CHECKPOINT_DIR))?;
        let run = Self {
            path: path.to_path_buf(),
        };
        run.write_new(CONFIG_FILE, config_to_toml(cfg)?.as_bytes())?;
        let manifest = RunManifest {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            config_fingerprint: config_fingerprint(cfg)?,
        };
        run.write_new(
            MANIFEST_FILE,
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(run)
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(CONFIG_FILE).is_file() {
            return Err(Error::invalid(format!(
                "{} is not a run directory",
                path.display()
            )));
        }
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.path.join(CHECKPOINT_DIR).join(format!("{name}.json"))
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        config_from_toml(&fs::read_to_string(self.file(CONFIG_FILE))?)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        Ok(serde_json::from_str(&fs::read_to_string(
            self.file(MANIFEST_FILE),
        )?)?)
    }

    /// Writes a file that must not exist yet.
    pub fn write_new(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)?;
        f.write_all(bytes)?;
        Ok(path)
    }

    pub fn append_jsonl<T: Serialize>(&self, name: &str, record: &T) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.file(name))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn reports(&self) -> Result<Vec<EpochReport>> {
        read_jsonl(&self.file(REPORTS_FILE))
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Serializes rows to CSV with a header taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrained,
    Adapted,
}

/// Versioned container of named parameter tensors. Discriminators are never
/// stored: only feature extractors survive adaptation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub code_version: String,
    pub config_fingerprint: String,
    pub config: ExperimentConfig,
    pub composition: Composition,
    pub models: Vec<ModelState>,
    /// Present on pre-training checkpoints so training can resume.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainState>,
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        cfg: &ExperimentConfig,
        models: Vec<ModelState>,
    ) -> Result<Self> {
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind,
            code_version: CODE_VERSION.to_string(),
            config_fingerprint: config_fingerprint(cfg)?,
            config: cfg.clone(),
            composition: cfg.composition,
            models,
            pretrain: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(f))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version:?}, expected {CHECKPOINT_FORMAT_VERSION}"
            )));
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        if ck.models.is_empty() {
            return Err(Error::Checkpoint("no models stored".into()));
        }
        Ok(ck)
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("target directory data needs a {what} path")))
}

/// Labelled source training split.
pub fn load_source(r: &DataRef) -> Result<DatasetSplit> {
    match r {
        DataRef::Synthetic { spec } => generate_synthetic(spec)?
            .target_train
            .with_role(SplitRole::SourceTrain),
        DataRef::Directory { train, .. } => {
            load_dataset_dir(train, &FilenameLayout::default(), SplitRole::SourceTrain)
        }
        DataRef::Splits { dir } => {
            load_split(&dir.join("train.json"))?.with_role(SplitRole::SourceTrain)
        }
    }
}

/// Target training split (labels hidden) plus gallery and query.
pub fn load_target(r: &DataRef) -> Result<TargetData> {
    let (train, gallery, query) = match r {
        DataRef::Synthetic { spec } => {
            let s = generate_synthetic(spec)?;
            (s.target_train, s.gallery, s.query)
        }
        DataRef::Directory {
            train,
            gallery,
            query,
        } => {
            let layout = FilenameLayout::default();
            (
                load_dataset_dir(train, &layout, SplitRole::TargetTrain)?,
                load_dataset_dir(&require(gallery, "gallery")?, &layout, SplitRole::Gallery)?,
                load_dataset_dir(&require(query, "query")?, &layout, SplitRole::Query)?,
            )
        }
        DataRef::Splits { dir } => (
            load_split(&dir.join("train.json"))?.with_role(SplitRole::TargetTrain)?,
            load_split(&dir.join("gallery.json"))?.with_role(SplitRole::Gallery)?,
            load_split(&dir.join("query.json"))?.with_role(SplitRole::Query)?,
        ),
    };
    Ok(TargetData {
        train: hide_labels(train)?,
        gallery,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_survives_toml() {
        let cfg = ExperimentConfig::toy();
        let back = config_from_toml(&config_to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load_config(
            None,
            &[
                "mu=0.25".into(),
                "mode=plain_adv".into(),
                "sampler.k=3".into(),
                "data.target.spec.correlation=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.mu, 0.25);
        assert_eq!(cfg.mode, crate::objectives::AdversarialMode::PlainAdv);
        assert_eq!(cfg.sampler.k, 3);
        match cfg.data.target {
            DataRef::Synthetic { spec } => assert_eq!(spec.correlation, 0.5),
            _ => unreachable!(),
        }
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(load_config(None, &["no_such_key=1".into()]).is_err());
        assert!(load_config(None, &["mu".into()]).is_err());
        assert!(load_config(None, &["mu=-1".into()]).is_err());
        assert!(load_config(None, &["mu.x=1".into()]).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        assert_eq!(
            config_fingerprint(&a).unwrap(),
            config_fingerprint(&b).unwrap()
        );
        b.mu = 0.2;
        assert_ne!(
            config_fingerprint(&a).unwrap(),
            config_fingerprint(&b).unwrap()
        );
    }

    #[test]
    fn run_dir_refuses_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy();
        let run = RunDir::create(&dir.path().join("r"), "adapt", &cfg).unwrap();
        assert_eq!(run.config().unwrap(), cfg);
        assert!(RunDir::create(run.path(), "adapt", &cfg).is_err());
        assert!(run.write_new(CONFIG_FILE, b"x").is_err());
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy();
        let model = crate::embedding::EmbeddingModel::new(cfg.model.clone(), 3).unwrap();
        let ck = Checkpoint::new(CheckpointKind::Adapted, &cfg, vec![model.state()]).unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.models[0], model.state());
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["format_version"] = 99.into();
        let p2 = dir.path().join("ck2.json");
        fs::write(&p2, v.to_string()).unwrap();
        assert!(matches!(Checkpoint::load(&p2), Err(Error::Checkpoint(_))));
    }
}
