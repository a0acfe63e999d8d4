//! Adversarial and supervised training, validation, model selection and
//! checkpointing.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamW, Moments};

use crate::audio::{make_paired_batch, make_unpaired_batch, Batch, PairedPool, Role, SegmentDataset, SegmentPool, Split};
use crate::autograd::Graph;
use crate::discriminators::{DiscriminatorEnsemble, DiscriminatorSet, EnsembleConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::metrics::{esr, hinge_d_loss_graph, hinge_g_loss_graph, MelConfig, MelSpectrogram};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Adversarial,
    Supervised,
}

/// Where the unpaired clean input comes from: the target tone only, or
/// every tone in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanPoolSpec {
    Single,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub discriminator_set: DiscriminatorSet,
    /// Divide every hidden discriminator channel count by this factor.
    pub disc_width_divisor: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-step multiplicative learning-rate decay; `None` keeps rates constant.
    pub lr_decay: Option<f64>,
    pub batch_size: usize,
    pub segment_length: usize,
    pub max_steps: u64,
    pub val_interval: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub clean_pool_spec: CleanPoolSpec,
    /// Pre-emphasis coefficient of the supervised ESR loss and of
    /// validation ESR; `None` disables it.
    pub preemphasis: Option<f64>,
    pub sample_with_replacement: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Adversarial,
            discriminator_set: DiscriminatorSet::MsdMpd,
            disc_width_divisor: 1,
            gen_lr: 5e-5,
            disc_lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: None,
            batch_size: 8,
            segment_length: crate::audio::DEFAULT_SEGMENT_LENGTH,
            max_steps: 200_000,
            val_interval: 1000,
            checkpoint_interval: 10_000,
            seed: 0,
            clean_pool_spec: CleanPoolSpec::Single,
            preemphasis: Some(crate::metrics::DEFAULT_PREEMPHASIS),
            sample_with_replacement: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be a positive finite number, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("lr_decay must lie in (0, 1], got {d}"));
            }
        }
        if self.batch_size == 0 || self.segment_length == 0 || self.disc_width_divisor == 0 {
            return bad("batch_size, segment_length and disc_width_divisor must be positive".into());
        }
        if self.val_interval == 0 || self.checkpoint_interval == 0 {
            return bad("val_interval and checkpoint_interval must be positive".into());
        }
        if let Some(c) = self.preemphasis {
            if !(0.0..1.0).contains(&c) {
                return bad(format!("preemphasis must lie in [0, 1), got {c}"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig::scaled(self.disc_width_divisor).with_set(self.discriminator_set)
    }

    /// Learning rate in effect at 0-based `step`.
    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match self.lr_decay {
            Some(d) => base * d.powf(step as f64),
            None => base,
        }
    }
}

/// Digest of everything that must match for a checkpoint to be resumed:
/// model topology and training hyperparameters. Run length and logging
/// cadence are excluded so a run can be extended.
pub fn config_digest(gen: &GeneratorConfig, ensemble: Option<&EnsembleConfig>, train: &TrainConfig) -> String {
    let mut t = serde_json::to_value(train).expect("config serializes");
    if let Some(obj) = t.as_object_mut() {
        for k in ["max_steps", "val_interval", "checkpoint_interval"] {
            obj.remove(k);
        }
    }
    let doc = serde_json::json!({ "generator": gen, "ensemble": ensemble, "train": t });
    // serde_json maps are ordered, so the encoding is canonical
    let bytes = serde_json::to_vec(&doc).expect("digest document serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub metric: String,
    pub value: f64,
    pub step: u64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T = f32> {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: Generator<T>,
    pub discriminator: Option<DiscriminatorEnsemble<T>>,
    pub gen_moments: Moments<T>,
    pub disc_moments: Option<Moments<T>>,
    pub rng: ChaCha8Rng,
    pub digest: String,
    pub best: Option<BestRecord>,
}

impl<T: Real> TrainState<T> {
    /// Fresh state: the generator (then the discriminators) are initialized
    /// from an RNG seeded with `config.seed`, which then drives batch
    /// sampling.
    pub fn new(config: TrainConfig, gen_config: &GeneratorConfig) -> Result<Self> {
        let ens = config.ensemble_config();
        Self::with_ensemble(config, gen_config, ens)
    }

    /// Like [`TrainState::new`] with an explicit discriminator topology
    /// (ignored in supervised mode).
    pub fn with_ensemble(config: TrainConfig, gen_config: &GeneratorConfig, ensemble: EnsembleConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::build(gen_config, &mut rng)?;
        let (discriminator, ens) = match config.mode {
            Mode::Adversarial => (Some(DiscriminatorEnsemble::build(&ensemble, &mut rng)?), Some(ensemble)),
            Mode::Supervised => (None, None),
        };
        let digest = config_digest(gen_config, ens.as_ref(), &config);
        Ok(Self {
            gen_moments: Moments::zeros_like(generator.params()),
            disc_moments: discriminator.as_ref().map(|d| Moments::zeros_like(d.params())),
            config,
            step: 0,
            generator,
            discriminator,
            rng,
            digest,
            best: None,
        })
    }

    /// Digest of the state's own configuration.
    pub fn current_digest(&self) -> String {
        config_digest(
            self.generator.config(),
            self.discriminator.as_ref().map(|d| d.config()),
            &self.config,
        )
    }

    /// Fail unless `self` was produced under the same configuration as
    /// `expected`.
    pub fn check_digest(&self, expected: &str) -> Result<()> {
        if self.digest != expected {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found: self.digest.clone(),
            });
        }
        Ok(())
    }
}

/// Per-sub mean logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubMean {
    pub sub: String,
    pub mean: f64,
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mode: Mode,
    pub gen_lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_esr: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub d_real: Vec<SubMean>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub d_fake: Vec<SubMean>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub g_fake: Vec<SubMean>,
}

fn diverged(step: u64, reason: impl Into<String>) -> Error {
    Error::Divergence {
        step,
        reason: reason.into(),
        checkpoint: None,
    }
}

fn check_finite<T: Real>(step: u64, what: &str, grads: &[Option<Tensor<T>>]) -> Result<()> {
    if grads.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(diverged(step, format!("non-finite {what} gradient")))
    }
}

fn batch_input<T: Real>(b: &Batch) -> Result<Tensor<T>> {
    if b.batch == 0 || b.length == 0 {
        return Err(Error::Batching("empty batch".into()));
    }
    Ok(b.to_tensor())
}

/// One discriminator update followed by one generator update.
///
/// The generator output is computed once. The discriminator update sees it
/// as a constant, so no gradient reaches the generator; the generator update
/// evaluates the freshly updated discriminators with their parameters as
/// constants, so no gradient reaches them.
pub fn adversarial_step<T: Real>(state: &mut TrainState<T>, clean: &Batch, rendered: &Batch) -> Result<StepLog> {
    if state.config.mode != Mode::Adversarial {
        return Err(Error::Config("adversarial_step requires adversarial mode".into()));
    }
    let step = state.step;
    let gen_lr = state.config.lr_at(state.config.gen_lr, step);
    let disc_lr = state.config.lr_at(state.config.disc_lr, step);
    let opt = state.config.optimizer();
    let disc = state.discriminator.as_mut().expect("adversarial state has discriminators");
    let disc_moments = state.disc_moments.as_mut().expect("adversarial state has moments");
    let x = batch_input::<T>(clean)?;
    let real = batch_input::<T>(rendered)?;
    disc.check_input(real.shape()[2])?;
    disc.check_input(x.shape()[2])?;

    disc.refresh_spectral();

    let mut g_graph = Graph::new();
    let xv = g_graph.constant(x);
    let (g_leaves, y) = state.generator.forward_graph(&mut g_graph, xv);
    let fake_value = g_graph.get(y).clone();
    if !fake_value.is_finite() {
        return Err(diverged(step, "non-finite generator output"));
    }

    // discriminator update
    let mut d_graph = Graph::new();
    let d_leaves = disc.params().leaves(&mut d_graph);
    let real_v = d_graph.constant(real);
    let fake_v = d_graph.constant(fake_value);
    let real_outs = disc.forward_with(&mut d_graph, &d_leaves, &real_v);
    let fake_outs = disc.forward_with(&mut d_graph, &d_leaves, &fake_v);
    let loss_d_var = hinge_d_loss_graph(&mut d_graph, &real_outs, &fake_outs)?;
    let loss_d = d_graph.get(loss_d_var).data()[0].to_f64_lossy();
    if !loss_d.is_finite() {
        return Err(diverged(step, format!("discriminator loss is {loss_d}")));
    }
    let sub_means = |graph: &Graph<T>, outs: &[crate::autograd::Var], disc: &DiscriminatorEnsemble<T>| {
        outs.iter()
            .zip(disc.subs())
            .map(|(&o, s)| SubMean {
                sub: s.name.clone(),
                mean: graph.get(o).mean().to_f64_lossy(),
            })
            .collect::<Vec<_>>()
    };
    let d_real = sub_means(&d_graph, &real_outs, disc);
    let d_fake = sub_means(&d_graph, &fake_outs, disc);
    let mut d_grads = d_graph.backward(loss_d_var);
    let d_grads: Vec<Option<Tensor<T>>> = d_leaves
        .iter()
        .map(|&v| d_grads.take(v))
        .collect();
    drop(d_graph);
    check_finite(step, "discriminator", &d_grads)?;
    opt.step(disc.params_mut(), &d_grads, disc_moments, disc_lr);

    // generator update against the updated discriminators
    let d_consts = disc.params().constants(&mut g_graph);
    let g_outs = disc.forward_with(&mut g_graph, &d_consts, &y);
    let loss_g_var = hinge_g_loss_graph(&mut g_graph, &g_outs);
    let loss_g = g_graph.get(loss_g_var).data()[0].to_f64_lossy();
    if !loss_g.is_finite() {
        return Err(diverged(step, format!("generator loss is {loss_g}")));
    }
    let g_fake = sub_means(&g_graph, &g_outs, disc);
    let mut g_grads = g_graph.backward(loss_g_var);
    let g_grads: Vec<Option<Tensor<T>>> = g_leaves
        .iter()
        .map(|&v| g_grads.take(v))
        .collect();
    check_finite(step, "generator", &g_grads)?;
    opt.step(state.generator.params_mut(), &g_grads, &mut state.gen_moments, gen_lr);

    state.step += 1;
    Ok(StepLog {
        step: state.step,
        mode: Mode::Adversarial,
        gen_lr,
        disc_lr: Some(disc_lr),
        loss_d: Some(loss_d),
        loss_g: Some(loss_g),
        loss_esr: None,
        d_real,
        d_fake,
        g_fake,
    })
}

/// One generator update minimizing the batch ESR against aligned targets.
pub fn supervised_step<T: Real>(state: &mut TrainState<T>, clean: &Batch, rendered: &Batch) -> Result<StepLog> {
    if clean.origins != rendered.origins || clean.length != rendered.length {
        return Err(Error::Pairing("supervised batches must be sample-aligned pairs".into()));
    }
    let step = state.step;
    let gen_lr = state.config.lr_at(state.config.gen_lr, step);
    let x = batch_input::<T>(clean)?;
    let target = batch_input::<T>(rendered)?;
    let mut graph = Graph::new();
    let xv = graph.constant(x);
    let (leaves, y) = state.generator.forward_graph(&mut graph, xv);
    let coeff = state.config.preemphasis.map(T::from_f64_lossy);
    let loss_var = graph.esr(y, &target, coeff).ok_or(Error::UndefinedEsr)?;
    let loss = graph.get(loss_var).data()[0].to_f64_lossy();
    if !loss.is_finite() {
        return Err(diverged(step, format!("ESR loss is {loss}")));
    }
    let mut grads = graph.backward(loss_var);
    let grads: Vec<Option<Tensor<T>>> = leaves
        .iter()
        .map(|&v| grads.take(v))
        .collect();
    check_finite(step, "generator", &grads)?;
    state
        .config
        .optimizer()
        .step(state.generator.params_mut(), &grads, &mut state.gen_moments, gen_lr);
    state.step += 1;
    Ok(StepLog {
        step: state.step,
        mode: Mode::Supervised,
        gen_lr,
        disc_lr: None,
        loss_d: None,
        loss_g: None,
        loss_esr: Some(loss),
        d_real: Vec::new(),
        d_fake: Vec::new(),
        g_fake: Vec::new(),
    })
}

/// Segment pools for one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    /// Unpaired clean input pools; more than one under [`CleanPoolSpec::Both`].
    pub clean_pools: Vec<SegmentPool>,
    pub rendered_pool: SegmentPool,
    /// Aligned training pairs, required by supervised mode.
    pub paired_train: Option<PairedPool>,
    /// Aligned validation pairs of the target tone.
    pub val: PairedPool,
}

impl TrainData {
    /// Pools for `target_tone` from a paired dataset. Under
    /// [`CleanPoolSpec::Both`] the clean input is the training clean audio
    /// of every tone, one pool per tone; validation always uses the target
    /// tone's pairs.
    pub fn from_dataset(ds: &SegmentDataset, target_tone: &str, spec: CleanPoolSpec) -> Result<Self> {
        let clean_pools = match spec {
            CleanPoolSpec::Single => vec![ds.pool(Role::Clean, Some(target_tone), Split::Train)],
            CleanPoolSpec::Both => {
                let mut tones: Vec<&str> = ds.entries.iter().map(|e| e.tone_label.as_str()).collect();
                tones.sort();
                tones.dedup();
                tones
                    .into_iter()
                    .map(|t| ds.pool(Role::Clean, Some(t), Split::Train))
                    .filter(|p| !p.is_empty())
                    .collect()
            }
        };
        Ok(Self {
            clean_pools,
            rendered_pool: ds.pool(Role::Rendered, Some(target_tone), Split::Train),
            paired_train: ds.paired_pool(Some(target_tone), Split::Train).ok(),
            val: ds.paired_pool(Some(target_tone), Split::Val)?,
        })
    }
}

/// Mean ESR and mel-L1 of the generator over aligned pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: u64,
    pub esr: f64,
    pub mel_l1: f64,
}

/// Evaluate on every pair (read-only); pairs whose target is silent are
/// skipped for ESR.
pub fn validate<T: Real>(
    generator: &Generator<T>,
    pairs: &PairedPool,
    mel: &MelSpectrogram,
    preemphasis: Option<f64>,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Pairing("validation set is empty".into()));
    }
    let (mut esr_sum, mut esr_n, mut mel_sum) = (0.0, 0usize, 0.0);
    for (c, r) in &pairs.pairs {
        let x: Vec<T> = c.samples().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        let y_hat: Vec<f64> = generator.process(&x)?.iter().map(|v| v.to_f64_lossy()).collect();
        let y: Vec<f64> = r.samples().iter().map(|&v| v as f64).collect();
        match esr(&y, &y_hat, preemphasis) {
            Ok(e) => {
                esr_sum += e;
                esr_n += 1;
            }
            Err(Error::UndefinedEsr) => {}
            Err(e) => return Err(e),
        }
        mel_sum += mel.l1(&y, &y_hat)?;
    }
    let esr_mean = if esr_n > 0 { esr_sum / esr_n as f64 } else { f64::NAN };
    Ok((esr_mean, mel_sum / pairs.len() as f64))
}

/// Output files of a run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn step_log(&self) -> PathBuf {
        self.dir.join("steps.jsonl")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ampg")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ampg")
    }

    pub fn periodic(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:08}.ampg"))
    }

    pub fn diverged(&self) -> PathBuf {
        self.dir.join("last_good.ampg")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState<f32>,
    pub history: Vec<ValRecord>,
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

const MAX_REDRAWS: usize = 32;

/// Paired batch whose targets are not all silent, redrawing up to
/// `MAX_REDRAWS` times.
fn draw_audible_pairs(paired: &PairedPool, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Batch, Batch)> {
    for _ in 0..MAX_REDRAWS {
        let (c, r) = make_paired_batch(paired, cfg.batch_size, cfg.sample_with_replacement, rng)?;
        if r.data.iter().any(|&v| v != 0.0) {
            return Ok((c, r));
        }
        log::debug!("redrawing a batch with silent targets");
    }
    Err(Error::UndefinedEsr)
}

/// Train from `state.step` up to `config.max_steps`, validating every
/// `val_interval` steps (and after the last step) and tracking the best
/// generator by validation mel-L1.
///
/// With `run` set, every step is appended to `steps.jsonl`, validation
/// records to `validation.jsonl`, and checkpoints are written: `best.ampg`
/// on improvement, `step_NNNNNNNN.ampg` every `checkpoint_interval` steps
/// and `last.ampg` at the end. On divergence the state from before the
/// failing step is written to `last_good.ampg` and its path is carried in
/// the error.
pub fn train(
    mut state: TrainState<f32>,
    data: &TrainData,
    mel_config: &MelConfig,
    run: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    cfg.validate()?;
    match cfg.mode {
        Mode::Adversarial => {
            if data.clean_pools.iter().all(|p| p.is_empty()) || data.rendered_pool.is_empty() {
                return Err(Error::Batching("adversarial training needs clean and rendered segments".into()));
            }
        }
        Mode::Supervised => {
            if data.paired_train.as_ref().is_none_or(|p| p.is_empty()) {
                return Err(Error::Pairing("supervised training needs aligned training pairs".into()));
            }
        }
    }
    let mel = MelSpectrogram::new(mel_config)?;
    if let Some(run) = run {
        std::fs::create_dir_all(&run.dir)?;
    }
    let mut history = Vec::new();
    let clean_refs: Vec<&SegmentPool> = data.clean_pools.iter().collect();

    while state.step < cfg.max_steps {
        let backup = state.clone();
        let result = match cfg.mode {
            Mode::Adversarial => make_unpaired_batch(
                &clean_refs,
                &data.rendered_pool,
                cfg.batch_size,
                cfg.sample_with_replacement,
                &mut state.rng,
            )
            .and_then(|(c, r)| adversarial_step(&mut state, &c, &r)),
            Mode::Supervised => {
                draw_audible_pairs(data.paired_train.as_ref().expect("checked above"), &cfg, &mut state.rng)
                    .and_then(|(c, r)| supervised_step(&mut state, &c, &r))
            }
        };
        let log = match result {
            Ok(log) => log,
            Err(Error::Divergence { step, reason, .. }) => {
                let checkpoint = match run {
                    Some(run) => {
                        save_checkpoint(&backup, run.diverged())?;
                        Some(run.diverged())
                    }
                    None => None,
                };
                log::error!("diverged at step {step}: {reason}");
                return Err(Error::Divergence {
                    step,
                    reason,
                    checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        if let Some(run) = run {
            append_line(&run.step_log(), &log)?;
        }
        if state.step.is_multiple_of(cfg.val_interval) || state.step == cfg.max_steps {
            let (esr_v, mel_v) = validate(&state.generator, &data.val, &mel, cfg.preemphasis)?;
            let rec = ValRecord {
                step: state.step,
                esr: esr_v,
                mel_l1: mel_v,
            };
            log::info!("step {}: val ESR {esr_v:.5}, mel-L1 {mel_v:.5}", state.step);
            history.push(rec);
            let improved = state.best.as_ref().is_none_or(|b| mel_v < b.value);
            if improved {
                state.best = Some(BestRecord {
                    metric: "mel_l1".into(),
                    value: mel_v,
                    step: state.step,
                });
            }
            if let Some(run) = run {
                append_line(&run.dir.join("validation.jsonl"), &rec)?;
                if improved {
                    save_checkpoint(&state, run.best())?;
                }
            }
        }
        if let Some(run) = run {
            if state.step.is_multiple_of(cfg.checkpoint_interval) {
                save_checkpoint(&state, run.periodic(state.step))?;
            }
        }
    }
    if let Some(run) = run {
        save_checkpoint(&state, run.last())?;
    }
    Ok(TrainOutcome { state, history })
}
