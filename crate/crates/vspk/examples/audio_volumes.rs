//! From a waveform to the network's input: WAV round-trip, seeded clip
//! extraction, and framing into a 3D volume.
//!
//! Run with `cargo run --release --example audio_volumes`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vspk::audio::{extract_clip, parse_wav, write_wav, Framing, WavClip, SAMPLE_RATE};

fn main() -> vspk::Result<()> {
    // One second of a 440 Hz tone at the fixed 16 kHz rate.
    let samples: Vec<f64> = (0..SAMPLE_RATE as usize)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    let clip = WavClip::new(SAMPLE_RATE, samples)?;

    // Through 16-bit PCM and back; quantization bounds the error at half a
    // step of 1/32768.
    let bytes = write_wav(&clip);
    let parsed = parse_wav(&bytes)?;
    let worst = clip
        .samples()
        .iter()
        .zip(parsed.samples())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!(
        "wav round-trip: {} bytes, {} samples, max quantization error {worst:.2e}",
        bytes.len(),
        parsed.len()
    );

    // A random half-second cut. The offset comes from the caller's seeded
    // stream, so the same seed always cuts the same window.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cut = extract_clip(&parsed, 0.5, &mut rng)?;
    println!("cut {} samples ({} s)", cut.len(), cut.duration_s());

    // Sliding frames, each folded into a square patch, stacked over time.
    let framing = Framing::default();
    let volume = framing.volume(&cut)?;
    println!(
        "framing window={} hop={} rows={} gives volume {:?}",
        framing.window,
        framing.hop,
        framing.patch_rows,
        volume.data.shape()
    );
    Ok(())
}
