//! Compare a target recording against two candidates with ESR, mel-L1 and
//! the Fréchet distance of toy embeddings.

use ampgan::metrics::{embed_for_fad, esr, frechet_distance, mel_l1, MelConfig, ToyEmbedder, DEFAULT_PREEMPHASIS};
use ampgan::toy::{saw_bursts, toy_amp};

fn main() -> ampgan::Result<()> {
    let clean = saw_bursts(4.0, 11, "clip")?;
    let target = toy_amp(&clean);
    let mut quieter = target.clone();
    quieter.samples.iter_mut().for_each(|v| *v *= 0.8);

    let embedder = ToyEmbedder::new(8192)?;
    let reference = embed_for_fad(std::slice::from_ref(&target), &embedder)?;
    let y = target.to_f64();
    for (name, candidate) in [("dry input", &clean), ("0.8x target", &quieter)] {
        let y_hat = candidate.to_f64();
        let e = esr(&y, &y_hat, Some(DEFAULT_PREEMPHASIS))?;
        let m = mel_l1(&y, &y_hat, &MelConfig::default())?;
        let f = frechet_distance(&reference, &embed_for_fad(std::slice::from_ref(candidate), &embedder)?)?;
        println!("{name:<12} ESR {e:.4}  L1_mel {m:.4}  FAD {f:.4}");
    }
    Ok(())
}
