//! Score real and generated audio with the discriminator ensemble and
//! compute the hinge losses.

use ampgan::discriminators::{DiscriminatorEnsemble, EnsembleConfig};
use ampgan::metrics::{hinge_d_loss, hinge_g_loss};
use ampgan::tensor::Tensor;
use ampgan::toy::{saw_bursts, toy_amp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ampgan::Result<()> {
    let cfg = EnsembleConfig::scaled(4);
    let len = 16384;
    let ens: DiscriminatorEnsemble<f32> = DiscriminatorEnsemble::build(&cfg, &mut ChaCha8Rng::seed_from_u64(5))?;
    println!("{} sub-discriminators, {} parameters", ens.subs().len(), ens.param_count());
    println!("minimum input length: {}", cfg.min_input_len());
    for (sub, (frames, width)) in ens.subs().iter().zip(cfg.map_shapes(len)?) {
        println!("  {:<8} logits {frames} x {width}", sub.name);
    }

    let clean = saw_bursts(1.0, 9, "c")?;
    let real = toy_amp(&clean);
    let as_tensor = |s: &[f32]| Tensor::new(vec![1, 1, s.len()], s.to_vec());
    let real_maps = ens.forward(&as_tensor(&real.samples[..len]))?;
    let fake_maps = ens.forward(&as_tensor(&clean.samples[..len]))?;
    println!("mean real logits: {:?}", real_maps.means());
    println!("hinge D: {:.4}", hinge_d_loss(&real_maps, &fake_maps)?);
    println!("hinge G: {:.4}", hinge_g_loss(&fake_maps));
    Ok(())
}
