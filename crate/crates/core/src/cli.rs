//! The `ampgan` command line: `normalize`, `split`, `train`, `render` and
//! `eval`.
//!
//! Every command reads a [`RunConfig`] (file plus `key=value` overrides),
//! resolves its paths under `--root` and writes the resolved configuration
//! next to its outputs. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 training divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{
    assign_splits, cache_path, load_audio, normalize_loudness, write_wav, AudioBuffer, Manifest, ManifestEntry, Role,
    SegmentDataset, SourceFile, Split,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{embed_for_fad, esr, frechet_distance, Embedder, MelSpectrogram, ToyEmbedder, DEFAULT_PREEMPHASIS};
use crate::trainer::{config_digest, load_checkpoint, train, Mode, RunPaths, TrainData, TrainState};

/// Name of the manifest `normalize` writes at the cache root.
pub const CACHE_MANIFEST: &str = "manifest.toml";

#[derive(Debug, Parser)]
#[command(name = "ampgan", version, about = "Unpaired adversarial guitar amplifier modeling")]
struct Cli {
    /// Directory against which every relative path is resolved.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration overrides such as `train.max_steps=100`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Loudness-normalize the manifest's recordings into the cache.
    Normalize(Common),
    /// Assign cached source files to train/val/test splits.
    Split(Common),
    /// Train a generator.
    Train(Common),
    /// Process a WAV file with a trained generator.
    Render(Common),
    /// Score a generator on paired test audio.
    Eval(Common),
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::DigestMismatch { .. } => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<String> {
    let root = match cli.root {
        Some(r) => r,
        None => std::env::current_dir()?,
    };
    let (Command::Normalize(common)
    | Command::Split(common)
    | Command::Train(common)
    | Command::Render(common)
    | Command::Eval(common)) = &cli.command;
    let config_path = common.config.as_ref().map(|p| root.join(p));
    let cfg = RunConfig::load(config_path.as_deref(), &common.overrides)?.rooted(&root);
    Ok(match cli.command {
        Command::Normalize(_) => pretty(&cmd_normalize(&cfg)?),
        Command::Split(_) => pretty(&cmd_split(&cfg)?),
        Command::Train(_) => pretty(&cmd_train(&cfg)?),
        Command::Render(_) => pretty(&cmd_render(&cfg)?),
        Command::Eval(_) => {
            let report = cmd_eval(&cfg)?;
            format!("{}\n{}", report.table(), report.to_json())
        }
    })
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("summary serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeSummary {
    pub processed: usize,
    pub clamped: usize,
    pub failed: usize,
    pub cache_dir: PathBuf,
}

/// Normalize every manifest entry into
/// `<cache_dir>/<tone_label>/<role>/<source_id>.wav` and write a manifest
/// of the cached files at the cache root. Failing files are logged and
/// skipped; the command fails if any did.
pub fn cmd_normalize(cfg: &RunConfig) -> Result<NormalizeSummary> {
    let manifest_path = RunConfig::require(&cfg.data.manifest, "data.manifest")?;
    let manifest = Manifest::load(manifest_path)?;
    if manifest.files.is_empty() {
        return Err(Error::Ingestion {
            path: manifest_path.clone(),
            reason: "manifest lists no files".into(),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let cache = &cfg.data.cache_dir;
    std::fs::create_dir_all(cache)?;
    let mut summary = NormalizeSummary {
        processed: 0,
        clamped: 0,
        failed: 0,
        cache_dir: cache.clone(),
    };
    let mut cached = Manifest::default();
    for entry in manifest.resolved(base) {
        let source_id = entry.source_id();
        let result = load_audio(&entry.path)
            .and_then(|buf| normalize_loudness(&buf, cfg.data.peak_db, cfg.data.target_lufs))
            .and_then(|n| {
                let out = cache_path(cache, &entry.tone_label, entry.role, &source_id);
                write_wav(&out, &AudioBuffer { source_id: source_id.clone(), ..n.buffer })?;
                Ok(n.clamped)
            });
        match result {
            Ok(clamped) => {
                summary.processed += 1;
                summary.clamped += clamped as usize;
                cached.files.push(ManifestEntry {
                    path: Path::new(&entry.tone_label)
                        .join(entry.role.as_str())
                        .join(format!("{source_id}.wav")),
                    role: entry.role,
                    tone_label: entry.tone_label.clone(),
                    source_id: Some(source_id),
                });
            }
            Err(e) => {
                log::error!("skipping {}: {e}", entry.path.display());
                summary.failed += 1;
            }
        }
    }
    std::fs::write(cache.join(CACHE_MANIFEST), cached.to_toml())?;
    cfg.write_resolved(cache)?;
    log::info!(
        "normalized {} files ({} clamped, {} failed)",
        summary.processed,
        summary.clamped,
        summary.failed
    );
    if summary.failed > 0 {
        return Err(Error::Normalization {
            source_id: format!("{} of {} files", summary.failed, manifest.files.len()),
            reason: "see log for per-file errors".into(),
        });
    }
    Ok(summary)
}

/// Load every file listed in the cache manifest.
pub fn load_cache(cache_dir: &Path) -> Result<Vec<SourceFile>> {
    let path = cache_dir.join(CACHE_MANIFEST);
    if !path.exists() {
        return Err(Error::Ingestion {
            path,
            reason: "no normalized cache here; run `ampgan normalize` first".into(),
        });
    }
    let manifest = Manifest::load(&path)?;
    manifest
        .resolved(cache_dir)
        .into_iter()
        .map(|e| {
            let mut buf = load_audio(&e.path)?;
            buf.source_id = e.source_id();
            Ok(SourceFile::new(buf, e.role, e.tone_label))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub tone_label: String,
    pub role: Role,
    pub source_id: String,
    pub split: Split,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    #[serde(rename = "file")]
    pub files: Vec<SplitRecord>,
}

/// Assign cached files to splits and write `splits.toml` to the output
/// directory. The same assignment is recomputed by `train` and `eval`.
pub fn cmd_split(cfg: &RunConfig) -> Result<SplitSummary> {
    let files = load_cache(&cfg.data.cache_dir)?;
    let ds = SegmentDataset::build(
        files,
        cfg.train.segment_length,
        cfg.data.split_ratios,
        cfg.data.split_seed,
        false,
    )?;
    let mut counts: BTreeMap<(String, Role, String), (Split, usize)> = BTreeMap::new();
    for e in &ds.entries {
        counts
            .entry((e.tone_label.clone(), e.role, e.segment.source_id().to_string()))
            .or_insert((e.split, 0))
            .1 += 1;
    }
    let summary = SplitSummary {
        files: counts
            .into_iter()
            .map(|((tone_label, role, source_id), (split, segments))| SplitRecord {
                tone_label,
                role,
                source_id,
                split,
                segments,
            })
            .collect(),
    };
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(
        cfg.output.dir.join("splits.toml"),
        toml::to_string(&summary).expect("splits serialize"),
    )?;
    cfg.write_resolved(&cfg.output.dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub best_step: Option<u64>,
    pub best_mel_l1: Option<f64>,
    pub final_val_esr: Option<f64>,
    pub final_val_mel_l1: Option<f64>,
}

/// Train on the cached dataset for `data.target_tone`, writing the run to
/// `output.dir`. With `output.resume` set, training continues from that
/// checkpoint provided its configuration digest matches.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let tone = RunConfig::require(&cfg.data.target_tone, "data.target_tone")?;
    let ensemble = (cfg.train.mode == Mode::Adversarial).then(|| cfg.train.ensemble_config());
    let digest = config_digest(&cfg.generator, ensemble.as_ref(), &cfg.train);
    let state = match &cfg.output.resume {
        Some(path) => {
            let mut st = load_checkpoint(path)?;
            st.check_digest(&digest)?;
            st.config = cfg.train.clone();
            st
        }
        None => TrainState::new(cfg.train.clone(), &cfg.generator)?,
    };
    let files = load_cache(&cfg.data.cache_dir)?;
    let ds = SegmentDataset::build(
        files,
        cfg.train.segment_length,
        cfg.data.split_ratios,
        cfg.data.split_seed,
        true,
    )?;
    let data = TrainData::from_dataset(&ds, tone, cfg.train.clean_pool_spec)?;
    cfg.write_resolved(&cfg.output.dir)?;
    let run = RunPaths::new(&cfg.output.dir);
    let outcome = train(state, &data, &cfg.mel, Some(&run))?;
    let last = outcome.history.last();
    Ok(TrainSummary {
        run_dir: cfg.output.dir.clone(),
        steps: outcome.state.step,
        best_step: outcome.state.best.as_ref().map(|b| b.step),
        best_mel_l1: outcome.state.best.as_ref().map(|b| b.value),
        final_val_esr: last.map(|r| r.esr),
        final_val_mel_l1: last.map(|r| r.mel_l1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSummary {
    pub output: PathBuf,
    pub samples: usize,
}

/// Stream `render.input` through the checkpoint's generator in chunks of
/// `render.chunk` samples and write 32-bit float 44.1 kHz mono output.
pub fn cmd_render(cfg: &RunConfig) -> Result<RenderSummary> {
    let ckpt = RunConfig::require(&cfg.render.checkpoint, "render.checkpoint")?;
    let input = RunConfig::require(&cfg.render.input, "render.input")?;
    let output = RunConfig::require(&cfg.render.output, "render.output")?;
    let state = load_checkpoint(ckpt)?;
    let x = load_audio(input)?;
    let y = state.generator.process_chunked(&x.samples, cfg.render.chunk)?;
    let out = AudioBuffer::new(y, x.sample_rate, x.source_id)?;
    write_wav(output, &out)?;
    if let Some(dir) = output.parent() {
        cfg.write_resolved(dir)?;
    }
    Ok(RenderSummary {
        output: output.clone(),
        samples: out.len(),
    })
}

/// Metrics of one test file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub tone_label: String,
    pub source_id: String,
    #[serde(rename = "L1_mel")]
    pub l1_mel: f64,
    /// `None` when the target is silent.
    #[serde(rename = "ESR")]
    pub esr: Option<f64>,
}

/// Corpus means; FAD is present only when an embedder is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "L1_mel")]
    pub l1_mel: f64,
    #[serde(rename = "ESR")]
    pub esr: Option<f64>,
    #[serde(rename = "FAD", skip_serializing_if = "Option::is_none", default)]
    pub fad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub embedder: Option<String>,
    pub preemphasis: Option<f64>,
    pub files: Vec<FileMetrics>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        pretty(self)
    }

    /// Plain-text table with one row per file and a mean row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        let mut s = format!("{:<32} {:>12} {:>12} {:>12}\n", "file", "L1_mel", "ESR", "FAD");
        for f in &self.files {
            let name = format!("{}/{}", f.tone_label, f.source_id);
            s += &format!("{name:<32} {:>12.6} {:>12} {:>12}\n", f.l1_mel, fmt(f.esr), "");
        }
        s += &format!(
            "{:<32} {:>12.6} {:>12} {:>12}",
            "mean",
            self.aggregate.l1_mel,
            fmt(self.aggregate.esr),
            fmt(self.aggregate.fad)
        );
        s
    }
}

/// Clean/rendered pairs for evaluation, matched by tone and source id.
fn pair_up(files: Vec<SourceFile>) -> Result<Vec<(SourceFile, SourceFile)>> {
    let mut clean = BTreeMap::new();
    let mut rendered = BTreeMap::new();
    for f in files {
        let key = (f.tone_label.clone(), f.buffer.source_id.clone());
        let map = match f.role {
            Role::Clean => &mut clean,
            Role::Rendered => &mut rendered,
        };
        if map.insert(key.clone(), f).is_some() {
            return Err(Error::Pairing(format!("duplicate test file {}/{}", key.0, key.1)));
        }
    }
    let mut pairs = Vec::new();
    for (key, r) in rendered {
        let c = clean
            .remove(&key)
            .ok_or_else(|| Error::Pairing(format!("rendered {}/{} has no clean counterpart", key.0, key.1)))?;
        pairs.push((c, r));
    }
    if let Some((tone, id)) = clean.keys().next() {
        return Err(Error::Pairing(format!("clean {tone}/{id} has no rendered counterpart")));
    }
    if pairs.is_empty() {
        return Err(Error::Pairing("no test pairs".into()));
    }
    Ok(pairs)
}

fn test_files(cfg: &RunConfig) -> Result<Vec<SourceFile>> {
    if let Some(path) = &cfg.eval.test_manifest {
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        return manifest
            .resolved(base)
            .into_iter()
            .map(|e| {
                let mut buf = load_audio(&e.path)?;
                buf.source_id = e.source_id();
                Ok(SourceFile::new(buf, e.role, e.tone_label))
            })
            .collect();
    }
    let tone = RunConfig::require(&cfg.data.target_tone, "data.target_tone")?;
    let files: Vec<SourceFile> = load_cache(&cfg.data.cache_dir)?
        .into_iter()
        .filter(|f| &f.tone_label == tone)
        .collect();
    let mut keep = Vec::new();
    for role in [Role::Clean, Role::Rendered] {
        let ids: Vec<String> = files
            .iter()
            .filter(|f| f.role == role)
            .map(|f| f.buffer.source_id.clone())
            .collect();
        let splits = assign_splits(&ids, cfg.data.split_ratios, cfg.data.split_seed, tone)?;
        keep.extend(
            files
                .iter()
                .filter(|f| f.role == role && splits.get(&f.buffer.source_id) == Some(&Split::Test))
                .cloned(),
        );
    }
    Ok(keep)
}

/// Evaluate `eval.checkpoint` on paired test audio and write the report to
/// `output.dir/eval.report`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ckpt = RunConfig::require(&cfg.eval.checkpoint, "eval.checkpoint")?;
    let pairs = pair_up(test_files(cfg)?)?;
    let state = load_checkpoint(ckpt)?;
    let mel = MelSpectrogram::new(&cfg.mel)?;
    let preemphasis = cfg.eval.preemphasis.then_some(cfg.train.preemphasis.unwrap_or(DEFAULT_PREEMPHASIS));
    let mut files = Vec::new();
    let mut references = Vec::new();
    let mut generated = Vec::new();
    for (c, r) in &pairs {
        let n = c.buffer.len().min(r.buffer.len());
        let y_hat = state.generator.process_chunked(&c.buffer.samples[..n], 65536)?;
        let y_hat64: Vec<f64> = y_hat.iter().map(|&v| v as f64).collect();
        let y64: Vec<f64> = r.buffer.samples[..n].iter().map(|&v| v as f64).collect();
        let e = match esr(&y64, &y_hat64, preemphasis) {
            Ok(e) => Some(e),
            Err(Error::UndefinedEsr) => None,
            Err(e) => return Err(e),
        };
        files.push(FileMetrics {
            tone_label: r.tone_label.clone(),
            source_id: r.buffer.source_id.clone(),
            l1_mel: mel.l1(&y64, &y_hat64)?,
            esr: e,
        });
        references.push(AudioBuffer::new(r.buffer.samples[..n].to_vec(), r.buffer.sample_rate, r.buffer.source_id.clone())?);
        generated.push(AudioBuffer::new(y_hat, r.buffer.sample_rate, r.buffer.source_id.clone())?);
    }
    let embedder: Option<Box<dyn Embedder>> = match cfg.eval.embedder {
        crate::config::EmbedderKind::None => None,
        crate::config::EmbedderKind::Toy => Some(Box::new(ToyEmbedder::default())),
    };
    let fad = match &embedder {
        Some(emb) => Some(frechet_distance(
            &embed_for_fad(&references, emb.as_ref())?,
            &embed_for_fad(&generated, emb.as_ref())?,
        )?),
        None => None,
    };
    let esrs: Vec<f64> = files.iter().filter_map(|f| f.esr).collect();
    let report = EvalReport {
        checkpoint: ckpt.clone(),
        embedder: embedder.as_ref().map(|e| e.model_id().to_string()),
        preemphasis,
        aggregate: Aggregate {
            l1_mel: files.iter().map(|f| f.l1_mel).sum::<f64>() / files.len() as f64,
            esr: (!esrs.is_empty()).then(|| esrs.iter().sum::<f64>() / esrs.len() as f64),
            fad,
        },
        files,
    };
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(cfg.output.dir.join(&cfg.eval.report), report.to_json())?;
    cfg.write_resolved(&cfg.output.dir)?;
    Ok(report)
}
