//! Render a WAV file through a trained checkpoint.
//!
//! `cargo run --release --example render <checkpoint.ampg> <input.wav> <output.wav>`

use ampgan::audio::{load_audio, write_wav, AudioBuffer, SAMPLE_RATE};
use ampgan::trainer::load_checkpoint;

fn main() -> ampgan::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [ckpt, input, output] = args.as_slice() else {
        eprintln!("usage: render <checkpoint.ampg> <input.wav> <output.wav>");
        std::process::exit(2);
    };
    let state = load_checkpoint(ckpt)?;
    println!("checkpoint at step {}, digest {}", state.step, state.digest);
    let gen = state.generator.collapse_weight_norm();
    let x = load_audio(input)?;
    let y = gen.process_chunked(&x.samples, 1 << 16)?;
    write_wav(output, &AudioBuffer::new(y, SAMPLE_RATE, x.source_id)?)?;
    println!("wrote {output}");
    Ok(())
}
