//! Load a WAV file, measure its loudness, normalize it and write the result.
//!
//! `cargo run --example normalize_audio [input.wav]`; without an argument a
//! synthetic recording is generated first.

use ampgan::audio::{load_audio, measure_integrated_loudness, normalize_loudness, write_wav, DEFAULT_PEAK_DB, DEFAULT_TARGET_LUFS};
use ampgan::toy::saw_bursts;

fn main() -> ampgan::Result<()> {
    let dir = std::env::temp_dir().join("ampgan-normalize-example");
    std::fs::create_dir_all(&dir)?;
    let input = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = dir.join("quiet.wav");
            let mut buf = saw_bursts(3.0, 1, "quiet")?;
            buf.samples.iter_mut().for_each(|v| *v *= 0.05);
            write_wav(&p, &buf)?;
            p
        }
    };

    let buf = load_audio(&input)?;
    println!("{}: {:.2} s, peak {:.3}", input.display(), buf.duration_secs(), buf.peak());
    println!("loudness before: {:?}", measure_integrated_loudness(&buf));

    let out = normalize_loudness(&buf, DEFAULT_PEAK_DB, DEFAULT_TARGET_LUFS)?;
    println!(
        "loudness after:  {:?} (clamped: {})",
        measure_integrated_loudness(&out.buffer),
        out.clamped
    );
    let dest = dir.join("normalized.wav");
    write_wav(&dest, &out.buffer)?;
    println!("wrote {}", dest.display());
    Ok(())
}
