//! Run configuration for the command-line pipeline.
//!
//! A run is configured by one TOML file whose every key is optional. The
//! effective value of a key comes from, in decreasing precedence, a
//! `key=value` override on the command line, the file, then the default.
//!
//! ```toml
//! [data]
//! manifest = "manifest.toml"
//! cache_dir = "cache"
//! target_tone = "crunch"
//!
//! [output]
//! dir = "runs/crunch"
//!
//! [train]
//! mode = "supervised"
//! max_steps = 2000
//! ```
//!
//! Tables `[generator]`, `[train]` and `[mel]` take the fields of
//! [`GeneratorConfig`], [`TrainConfig`] and [`MelConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{SplitRatios, DEFAULT_PEAK_DB, DEFAULT_TARGET_LUFS};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::metrics::MelConfig;
use crate::trainer::TrainConfig;

/// File name of the resolved configuration written next to command outputs.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest of raw recordings (read by `normalize`).
    pub manifest: Option<PathBuf>,
    /// Root of the normalized-audio cache.
    pub cache_dir: PathBuf,
    /// Tone whose rendered audio is the training target.
    pub target_tone: Option<String>,
    pub split_seed: u64,
    pub split_ratios: SplitRatios,
    pub peak_db: f64,
    pub target_lufs: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            cache_dir: "cache".into(),
            target_tone: None,
            split_seed: 0,
            split_ratios: SplitRatios::default(),
            peak_db: DEFAULT_PEAK_DB,
            target_lufs: DEFAULT_TARGET_LUFS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory receiving run artifacts (checkpoints, logs, reports).
    pub dir: PathBuf,
    /// Checkpoint to resume training from.
    pub resume: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: "runs/default".into(),
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Output samples per chunk.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            input: None,
            output: None,
            chunk: 65536,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    None,
    /// The built-in 32-band log-mel embedder.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    /// Manifest of already-normalized clean/rendered test pairs. When unset,
    /// the test split of `data.target_tone` in the cache is used.
    pub test_manifest: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub preemphasis: bool,
    /// Report file name inside `output.dir`.
    pub report: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            test_manifest: None,
            embedder: EmbedderKind::None,
            preemphasis: true,
            report: "eval.json".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output: OutputConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub mel: MelConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Rewrite serde's "unknown field" message into one naming the closest
/// valid key.
fn explain(err: toml::de::Error) -> Error {
    let msg = err.message().to_string();
    let Some(rest) = msg.strip_prefix("unknown field `") else {
        return config_err(err.to_string());
    };
    let unknown = rest.split('`').next().unwrap_or_default();
    let valid: Vec<&str> = rest
        .split_once("expected ")
        .map(|(_, list)| list.split('`').skip(1).step_by(2).collect())
        .unwrap_or_default();
    let nearest = valid
        .iter()
        .map(|k| (strsim::jaro_winkler(unknown, k), *k))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    let hint = match nearest {
        Some((_, k)) => format!("; did you mean `{k}`?"),
        None => String::new(),
    };
    config_err(format!("unknown key `{unknown}`{hint}\n{err}"))
}

/// Parse a command-line override value as TOML, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `dotted.key = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Merge defaults, the optional file text and overrides.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match file_text {
            Some(text) => toml::from_str(text).map_err(explain)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(explain)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (when given) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?,
            ),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.mel.validate()?;
        self.data.split_ratios.validate()?;
        if self.render.chunk == 0 {
            return Err(config_err("render.chunk must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    /// Make every configured path absolute under `root`.
    pub fn rooted(mut self, root: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p);
            }
        };
        fix_opt(&mut self.data.manifest);
        fix(&mut self.data.cache_dir);
        fix(&mut self.output.dir);
        fix_opt(&mut self.output.resume);
        fix_opt(&mut self.render.checkpoint);
        fix_opt(&mut self.render.input);
        fix_opt(&mut self.render.output);
        fix_opt(&mut self.eval.checkpoint);
        fix_opt(&mut self.eval.test_manifest);
        self
    }

    /// A required optional field, or a config error naming it.
    pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| config_err(format!("missing required key `{key}`")))
    }
}
