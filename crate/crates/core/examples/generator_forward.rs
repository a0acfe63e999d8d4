//! Build the generator, inspect it and run audio through it, whole and in
//! chunks.

use ampgan::generator::{Generator, GeneratorConfig};
use ampgan::toy::saw_bursts;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ampgan::Result<()> {
    let cfg = GeneratorConfig::default();
    let gen: Generator<f32> = Generator::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("dilations: {:?}", cfg.dilations());
    println!("receptive field: {} samples", gen.receptive_field());
    println!("parameters: {}", gen.param_count());

    let input = saw_bursts(1.0, 3, "in")?;
    let t = std::time::Instant::now();
    let whole = gen.process(&input.samples)?;
    println!("processed {} samples in {:.2?}", whole.len(), t.elapsed());

    let chunked = gen.process_chunked(&input.samples, 4096)?;
    let same = whole.iter().zip(&chunked).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("chunked output identical: {same}");

    let collapsed = gen.collapse_weight_norm().process(&input.samples)?;
    let diff = whole.iter().zip(&collapsed).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max difference after folding weight norm: {diff:.2e}");
    Ok(())
}
