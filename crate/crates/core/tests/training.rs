//! Training steps checked against hand-rolled optimizer arithmetic,
//! isolation between the two players, and checkpoint guards.

use ampgan::audio::Batch;
use ampgan::autograd::Graph;
use ampgan::discriminators::{DiscriminatorEnsemble, DiscriminatorSet, EnsembleConfig};
use ampgan::generator::{Generator, GeneratorConfig};
use ampgan::metrics::{hinge_d_loss_graph, hinge_g_loss_graph, MelConfig};
use ampgan::nn::{spectral_norm_of, ParamStore};
use ampgan::tensor::Tensor;
use ampgan::toy::ToyTask;
use ampgan::trainer::{
    adversarial_step, load_checkpoint, BestRecord, save_checkpoint, supervised_step, train, Mode, RunPaths, TrainConfig, TrainState,
};
use ampgan::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const LEN: usize = 64;
/// Output of the last gated layer's residual path, which nothing consumes.
const LAST_RESIDUAL: &str = "gen.layer1.residual";

fn batch(rng: &mut ChaCha8Rng, tag: &str) -> Batch {
    Batch {
        data: (0..2 * LEN).map(|_| rng.gen_range(-0.8f32..0.8)).collect(),
        batch: 2,
        length: LEN,
        origins: vec![(format!("{tag}0"), 0), (format!("{tag}1"), 0)],
    }
}

fn micro_state(mode: Mode) -> TrainState<f64> {
    let cfg = TrainConfig {
        mode,
        gen_lr: 1e-3,
        disc_lr: 2e-3,
        segment_length: LEN,
        // keeps Adam's normalization away from gradients finite differences cannot resolve
        eps: 1e-5,
        ..TrainConfig::default()
    };
    TrainState::with_ensemble(cfg, &GeneratorConfig::micro(2, 4), EnsembleConfig::micro()).unwrap()
}

fn fingerprint<T: ampgan::tensor::Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

/// Central-difference gradient of `loss` for every scalar of `store(model)`.
fn fd_grads<M: Clone>(model: &M, store: fn(&mut M) -> &mut ParamStore<f64>, loss: &dyn Fn(&M) -> f64) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut work = model.clone();
    let n = store(&mut work).len();
    (0..n)
        .map(|i| {
            (0..store(&mut work).get(i).len())
                .map(|j| {
                    let orig = store(&mut work).get(i).data()[j];
                    store(&mut work).get_mut(i).data_mut()[j] = orig + h;
                    let up = loss(&work);
                    store(&mut work).get_mut(i).data_mut()[j] = orig - h;
                    let down = loss(&work);
                    store(&mut work).get_mut(i).data_mut()[j] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// Per-scalar adaptive-moment state for the reference optimizer.
struct RefAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl RefAdam {
    fn new(store: &ParamStore<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = (0..store.len()).map(|i| vec![0.0; store.get(i).len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Expected parameters after one update. Parameters named in `unread`
    /// are not reached by the loss and stay put.
    fn step(&mut self, store: &ParamStore<f64>, grads: &[Vec<f64>], cfg: &TrainConfig, lr: f64, unread: &str) -> Vec<Vec<f64>> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let p = store.get(i).data();
            if store.name(i).starts_with(unread) {
                assert!(g.iter().all(|&x| x == 0.0));
                out.push(p.to_vec());
                continue;
            }
            let row = (0..p.len())
                .map(|j| {
                    self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g[j];
                    self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g[j] * g[j];
                    let m_hat = self.m[i][j] / (1.0 - b1.powi(self.t));
                    let v_hat = self.v[i][j] / (1.0 - b2.powi(self.t));
                    p[j] - lr * cfg.weight_decay * p[j] - lr * m_hat / (v_hat.sqrt() + cfg.eps)
                })
                .collect();
            out.push(row);
        }
        out
    }
}

/// Largest deviation between actual and expected parameter deltas,
/// relative to the expected delta. The floor of `lr / 10` covers parameters
/// whose true gradient is below the ~1e-9 resolution of the difference
/// quotient, where Adam turns that noise into deltas of order `1e-4 lr`.
fn delta_error(before: &ParamStore<f64>, after: &ParamStore<f64>, expected: &[Vec<f64>], lr: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, exp) in expected.iter().enumerate() {
        for ((b, a), e) in before.get(i).data().iter().zip(after.get(i).data()).zip(exp) {
            let (d, de) = (a - b, e - b);
            let e = (d - de).abs() / de.abs().max(0.1 * lr);
            worst = worst.max(e);
        }
    }
    worst
}

fn supervised_loss(g: &Generator<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let mut graph = Graph::new();
    let xv = graph.constant(x.clone());
    let (_, y) = g.forward_graph(&mut graph, xv);
    let l = graph.esr(y, target, Some(0.95)).unwrap();
    graph.get(l).data()[0]
}

#[test]
fn supervised_updates_match_reference_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut state = micro_state(Mode::Supervised);
    let (clean, mut rendered) = (batch(&mut rng, "c"), batch(&mut rng, "r"));
    rendered.origins = clean.origins.clone();
    let x: Tensor<f64> = clean.to_tensor();
    let target: Tensor<f64> = rendered.to_tensor();
    let mut reference = RefAdam::new(state.generator.params());
    for _ in 0..3 {
        let before = state.generator.clone();
        let grads = fd_grads(&before, |g| g.params_mut(), &|g| supervised_loss(g, &x, &target));
        let expected = reference.step(before.params(), &grads, &state.config, state.config.gen_lr, LAST_RESIDUAL);
        supervised_step(&mut state, &clean, &rendered).unwrap();
        let err = delta_error(before.params(), state.generator.params(), &expected, state.config.gen_lr);
        assert!(err <= 1e-3, "step {}: {err}", state.step);
    }
}

#[test]
fn adversarial_updates_match_reference_optimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut state = micro_state(Mode::Adversarial);
    let (clean, rendered) = (batch(&mut rng, "c"), batch(&mut rng, "r"));
    let x: Tensor<f64> = clean.to_tensor();
    let real: Tensor<f64> = rendered.to_tensor();
    let mut ref_d = RefAdam::new(state.discriminator.as_ref().unwrap().params());
    let mut ref_g = RefAdam::new(state.generator.params());
    for _ in 0..2 {
        let gen_before = state.generator.clone();
        let mut disc_before = state.discriminator.clone().unwrap();
        disc_before.refresh_spectral();
        let fake = gen_before.forward(&x).unwrap();
        let d_loss = |d: &DiscriminatorEnsemble<f64>| {
            let mut graph = Graph::new();
            let c = d.params().constants(&mut graph);
            let (r, f) = (graph.constant(real.clone()), graph.constant(fake.clone()));
            let (ro, fo) = (d.forward_with(&mut graph, &c, &r), d.forward_with(&mut graph, &c, &f));
            let l = hinge_d_loss_graph(&mut graph, &ro, &fo).unwrap();
            graph.get(l).data()[0]
        };
        let d_grads = fd_grads(&disc_before, |d| d.params_mut(), &d_loss);
        let d_expected = ref_d.step(disc_before.params(), &d_grads, &state.config, state.config.disc_lr, "none");

        adversarial_step(&mut state, &clean, &rendered).unwrap();
        let disc_after = state.discriminator.as_ref().unwrap();
        let err = delta_error(disc_before.params(), disc_after.params(), &d_expected, state.config.disc_lr);
        assert!(err <= 1e-3, "discriminator step {}: {err}", state.step);

        let g_loss = |g: &Generator<f64>| {
            let mut graph = Graph::new();
            let xv = graph.constant(x.clone());
            let (_, y) = g.forward_graph(&mut graph, xv);
            let c = disc_after.params().constants(&mut graph);
            let outs = disc_after.forward_with(&mut graph, &c, &y);
            let l = hinge_g_loss_graph(&mut graph, &outs);
            graph.get(l).data()[0]
        };
        let g_grads = fd_grads(&gen_before, |g| g.params_mut(), &g_loss);
        let g_expected = ref_g.step(gen_before.params(), &g_grads, &state.config, state.config.gen_lr, LAST_RESIDUAL);
        let err = delta_error(gen_before.params(), state.generator.params(), &g_expected, state.config.gen_lr);
        assert!(err <= 1e-3, "generator step {}: {err}", state.step);
    }
}

#[test]
fn each_player_only_moves_its_own_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (clean, rendered) = (batch(&mut rng, "c"), batch(&mut rng, "r"));
    let prints = |s: &TrainState<f64>| {
        (fingerprint(s.generator.params()), fingerprint(s.discriminator.as_ref().unwrap().params()))
    };

    let mut d_only = micro_state(Mode::Adversarial);
    d_only.config.gen_lr = 0.0;
    let (g0, d0) = prints(&d_only);
    adversarial_step(&mut d_only, &clean, &rendered).unwrap();
    let (g1, d1) = prints(&d_only);
    assert_eq!(g0, g1);
    assert_ne!(d0, d1);

    let mut g_only = micro_state(Mode::Adversarial);
    g_only.config.disc_lr = 0.0;
    adversarial_step(&mut g_only, &clean, &rendered).unwrap();
    let (g2, d2) = prints(&g_only);
    assert_ne!(g0, g2);
    assert_eq!(d0, d2);

    let mut frozen = micro_state(Mode::Adversarial);
    frozen.config.gen_lr = 0.0;
    frozen.config.disc_lr = 0.0;
    let log = adversarial_step(&mut frozen, &clean, &rendered).unwrap();
    assert_eq!(prints(&frozen), (g0, d0));
    assert!(log.loss_d.unwrap().is_finite() && log.loss_g.unwrap().is_finite());
    assert_eq!(log.d_real.len(), 7);
}

#[test]
fn perfect_generator_only_decays() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut state = micro_state(Mode::Supervised);
    let clean = batch(&mut rng, "c");
    let y = state.generator.forward(&clean.to_tensor::<f64>()).unwrap();
    // targets are stored as f32; use an f32-exact generator output
    let rendered = Batch {
        data: y.data().iter().map(|&v| v as f32).collect(),
        ..clean.clone()
    };
    let exact: Vec<f64> = rendered.data.iter().map(|&v| v as f64).collect();
    let before = state.generator.clone();
    let mut diff: f64 = 0.0;
    for (a, b) in exact.iter().zip(y.data()) {
        diff = diff.max((a - b).abs());
    }
    let log = supervised_step(&mut state, &clean, &rendered).unwrap();
    assert!(log.loss_esr.unwrap() < 1e-12, "{:?} (rounding {diff:e})", log.loss_esr);
    let shrink = 1.0 - state.config.gen_lr * state.config.weight_decay;
    for i in 0..before.params().len() {
        for (a, b) in before.params().get(i).data().iter().zip(state.generator.params().get(i).data()) {
            let unread = before.params().name(i).starts_with(LAST_RESIDUAL);
            let want = if unread { *a } else { a * shrink };
            // gradients from f32 rounding of the target are ~1e-8; Adam
            // normalizes them, so allow the resulting lr-sized move
            assert!((b - want).abs() <= 1.1 * state.config.gen_lr, "{}: {a} -> {b}", before.params().name(i));
        }
    }
}

#[test]
fn spectral_layers_stay_normalized_through_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = TrainConfig {
        segment_length: 2048,
        disc_width_divisor: 32,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::new(cfg, &GeneratorConfig::micro(2, 4)).unwrap();
    let mk = |rng: &mut ChaCha8Rng, tag: &str| Batch {
        data: (0..2 * 2048).map(|_| rng.gen_range(-0.8f32..0.8)).collect(),
        batch: 2,
        length: 2048,
        origins: vec![(format!("{tag}0"), 0), (format!("{tag}1"), 0)],
    };
    for _ in 0..10 {
        let (c, r) = (mk(&mut rng, "c"), mk(&mut rng, "r"));
        adversarial_step(&mut state, &c, &r).unwrap();
        let disc = state.discriminator.as_ref().unwrap();
        // the step refreshes the power iteration before using the weights
        let mut probe = disc.clone();
        probe.refresh_spectral();
        let weights = probe.spectral_weights();
        assert_eq!(weights.len(), 8);
        for w in weights {
            let s = spectral_norm_of(&w, 200);
            assert!(s <= 1.0 + 1e-3, "step {}: {s}", state.step);
        }
    }
}

#[test]
fn msd_only_uses_two_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = TrainConfig {
        discriminator_set: DiscriminatorSet::MsdOnly,
        segment_length: LEN,
        ..TrainConfig::default()
    };
    let ens = EnsembleConfig::micro().with_set(DiscriminatorSet::MsdOnly);
    let mut state = TrainState::<f64>::with_ensemble(cfg, &GeneratorConfig::micro(2, 4), ens).unwrap();
    let log = adversarial_step(&mut state, &batch(&mut rng, "c"), &batch(&mut rng, "r")).unwrap();
    let names: Vec<&str> = log.d_real.iter().map(|s| s.sub.as_str()).collect();
    assert_eq!(names, ["msd1", "msd2"]);
}

fn toy_run_config(max_steps: u64) -> TrainConfig {
    TrainConfig {
        mode: Mode::Supervised,
        batch_size: 2,
        segment_length: 2048,
        max_steps,
        val_interval: 5,
        checkpoint_interval: 5,
        gen_lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn train_loop_checkpoints_and_resumes() {
    let task = ToyTask::generate(10.0, 1.0, 1.0, 4).unwrap();
    let data = task.data(2048, 8192).unwrap();
    let gen_cfg = GeneratorConfig::micro(3, 4);
    let mel = MelConfig::default();

    let zero = tempfile::tempdir().unwrap();
    let state = TrainState::new(toy_run_config(0), &gen_cfg).unwrap();
    let init = state.clone();
    let out = train(state, &data, &mel, Some(&RunPaths::new(zero.path()))).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.state, init);

    let full = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(full.path());
    let out = train(TrainState::new(toy_run_config(20), &gen_cfg).unwrap(), &data, &mel, Some(&paths)).unwrap();
    assert_eq!(out.history.len(), 4);
    let best = load_checkpoint(paths.best()).unwrap();
    let best_record = best.best.clone().unwrap();
    assert_eq!(best_record.metric, "mel_l1");
    let min = out.history.iter().map(|r| r.mel_l1).fold(f64::INFINITY, f64::min);
    assert_eq!(best_record.value, min);
    assert_eq!(std::fs::read_to_string(paths.step_log()).unwrap().lines().count(), 20);

    let half = tempfile::tempdir().unwrap();
    let hp = RunPaths::new(half.path());
    train(TrainState::new(toy_run_config(10), &gen_cfg).unwrap(), &data, &mel, Some(&hp)).unwrap();
    let mut resumed = load_checkpoint(hp.last()).unwrap();
    resumed.check_digest(&TrainState::<f32>::new(toy_run_config(20), &gen_cfg).unwrap().digest).unwrap();
    resumed.config.max_steps = 20;
    let out_resumed = train(resumed, &data, &mel, Some(&hp)).unwrap();
    assert_eq!(out_resumed.state, out.state);
    assert_eq!(std::fs::read(hp.periodic(20)).unwrap(), std::fs::read(paths.periodic(20)).unwrap());
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ampg");
    let mut state = TrainState::<f32>::new(toy_run_config(10), &GeneratorConfig::micro(2, 4)).unwrap();
    state.best = Some(BestRecord {
        metric: "mel_l1".into(),
        value: 3.9092377315468796,
        step: 5,
    });
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, state);
    let other = TrainConfig {
        gen_lr: 2e-3,
        ..toy_run_config(10)
    };
    let expected = TrainState::<f32>::new(other, &GeneratorConfig::micro(2, 4)).unwrap().digest;
    match loaded.check_digest(&expected) {
        Err(Error::DigestMismatch { expected: e, found }) => {
            assert_eq!(e, expected);
            assert_eq!(found, state.digest);
            let msg = loaded.check_digest(&expected).unwrap_err().to_string();
            assert!(msg.contains(&e) && msg.contains(&found), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}
