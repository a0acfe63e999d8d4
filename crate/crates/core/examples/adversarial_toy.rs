//! A few adversarial steps on unpaired toy data, printing the losses and the
//! mean logit of every sub-discriminator.

use ampgan::audio::make_unpaired_batch;
use ampgan::generator::GeneratorConfig;
use ampgan::toy::ToyTask;
use ampgan::trainer::{adversarial_step, Mode, TrainConfig, TrainState};

fn main() -> ampgan::Result<()> {
    let task = ToyTask::generate(10.0, 1.0, 1.0, 3)?;
    let data = task.data(4096, 44100)?;
    let cfg = TrainConfig {
        mode: Mode::Adversarial,
        segment_length: 4096,
        batch_size: 2,
        disc_width_divisor: 16,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::new(cfg, &GeneratorConfig::micro(6, 8))?;
    let pools: Vec<_> = data.clean_pools.iter().collect();
    for _ in 0..10 {
        let (clean, rendered) = make_unpaired_batch(&pools, &data.rendered_pool, 2, true, &mut state.rng)?;
        let log = adversarial_step(&mut state, &clean, &rendered)?;
        let real: Vec<String> = log.d_real.iter().map(|s| format!("{}={:+.3}", s.sub, s.mean)).collect();
        println!(
            "step {:>2}  loss_d {:.4}  loss_g {:.4}  real [{}]",
            log.step,
            log.loss_d.unwrap_or(f64::NAN),
            log.loss_g.unwrap_or(f64::NAN),
            real.join(" ")
        );
    }
    Ok(())
}
