//! Interrupt a run, resume it from its checkpoint and confirm it matches an
//! uninterrupted run bit for bit.

use ampgan::generator::GeneratorConfig;
use ampgan::metrics::MelConfig;
use ampgan::toy::ToyTask;
use ampgan::trainer::{load_checkpoint, train, Mode, RunPaths, TrainConfig, TrainState};

fn main() -> ampgan::Result<()> {
    let task = ToyTask::generate(10.0, 1.0, 1.0, 4)?;
    let data = task.data(2048, 8192)?;
    let gen = GeneratorConfig::micro(4, 4);
    let cfg = |max_steps| TrainConfig {
        mode: Mode::Supervised,
        segment_length: 2048,
        batch_size: 2,
        max_steps,
        val_interval: 10,
        checkpoint_interval: 10,
        ..TrainConfig::default()
    };
    let mel = MelConfig::default();
    let dir = std::env::temp_dir().join("ampgan-resume-example");
    let _ = std::fs::remove_dir_all(&dir);

    let full = train(TrainState::new(cfg(40), &gen)?, &data, &mel, Some(&RunPaths::new(dir.join("full"))))?;

    let half = RunPaths::new(dir.join("half"));
    train(TrainState::new(cfg(20), &gen)?, &data, &mel, Some(&half))?;
    let mut resumed = load_checkpoint(half.last())?;
    resumed.check_digest(&full.state.digest)?;
    println!("resuming at step {} (digest {})", resumed.step, &resumed.digest[..12]);
    resumed.config.max_steps = 40;
    let resumed = train(resumed, &data, &mel, Some(&half))?;

    let a = std::fs::read(dir.join("full").join("last.ampg"))?;
    let b = std::fs::read(half.last())?;
    println!("final checkpoints identical: {}", a == b);
    println!("states equal: {}", resumed.state == full.state);
    Ok(())
}
