//! Fit a small generator to the synthetic toy amplifier with the ESR loss.
//!
//! `cargo run --release --example supervised_toy [steps]`

use ampgan::generator::GeneratorConfig;
use ampgan::metrics::MelConfig;
use ampgan::toy::ToyTask;
use ampgan::trainer::{train, Mode, TrainConfig, TrainState};

fn main() -> ampgan::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let task = ToyTask::generate(20.0, 2.0, 2.0, 7)?;
    let data = task.data(4096, 44100)?;
    let cfg = TrainConfig {
        mode: Mode::Supervised,
        segment_length: 4096,
        batch_size: 4,
        max_steps: steps,
        val_interval: 50,
        gen_lr: 3e-3,
        ..TrainConfig::default()
    };
    let state = TrainState::new(cfg, &GeneratorConfig::micro(6, 8))?;
    let out = train(state, &data, &MelConfig::default(), None)?;
    for rec in &out.history {
        println!("step {:>5}  val ESR {:.5}  val L1_mel {:.4}", rec.step, rec.esr, rec.mel_l1);
    }
    if let Some(best) = &out.state.best {
        println!("best {} {:.4} at step {}", best.metric, best.value, best.step);
    }
    Ok(())
}
