//! Synthetic speaker corpus: a desk-scale stand-in for a real enrollment
//! corpus with controllable separability.
//!
//! Each synthetic speaker owns three fundamental frequencies drawn from a
//! per-speaker band of [90, 300] Hz, two fixed formant-like spectral
//! peaks, and one fixed set of harmonic phases (the pulse shape of the
//! voice, kept stable across utterances the way a glottal source is). An
//! utterance is a harmonic tone at one of the fundamentals shaped by the
//! speaker's envelope and phases, with Gaussian noise at 20 dB SNR. Bands
//! are disjoint across speakers, so mean spectra separate by construction
//! while utterances of one speaker still vary in pitch, length, and
//! noise.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{write_wav, WavClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::fewshot::{DatasetManifest, ManifestEntry};
use crate::seeding::sub_rng;

/// Fundamental-frequency range shared out among speakers.
pub const F0_RANGE: [f64; 2] = [90.0, 300.0];
/// Signal-to-noise ratio of the additive Gaussian noise, in dB.
pub const NOISE_SNR_DB: f64 = 20.0;
/// Utterance length bounds in seconds.
pub const UTTERANCE_SECONDS: [f64; 2] = [4.0, 5.0];
/// Harmonics per voice; synthesis uses the first `floor(7 kHz / f0)`.
pub const MAX_HARMONICS: usize = 40;

/// Voice description: what stays fixed across one speaker's utterances.
#[derive(Debug, Clone)]
struct VoiceProfile {
    fundamentals: [f64; 3],
    formant_centers: [f64; 2],
    formant_widths: [f64; 2],
    formant_gains: [f64; 2],
    harmonic_phases: [f64; MAX_HARMONICS],
}

impl VoiceProfile {
    /// Derives speaker `s` of `count` from the corpus seed. Fundamentals
    /// come from the speaker's own slice of the range, so no two speakers
    /// share a pitch region.
    fn derive(seed: u64, s: usize, count: usize) -> Self {
        let mut rng = sub_rng(seed, &format!("speaker:{s}"));
        let band = (F0_RANGE[1] - F0_RANGE[0]) / count as f64;
        let lo = F0_RANGE[0] + band * s as f64;
        // Inner margin keeps neighboring speakers' pitches apart even at
        // band edges.
        let margin = band * 0.15;
        let base = rng.random_range(lo + margin..lo + band - margin);
        // The three pitches are small detunings of one base, so utterances
        // of a speaker stay one tight spectral cluster while neighboring
        // bands remain far wider than the detuning.
        let mut fundamentals = [0.0; 3];
        for f in &mut fundamentals {
            *f = base * rng.random_range(0.99..1.01);
        }
        // The phase of each harmonic is a voice trait: it fixes the pulse
        // shape that repeats every pitch period, which is what a waveform
        // model can recognize across utterances.
        let mut harmonic_phases = [0.0; MAX_HARMONICS];
        for p in &mut harmonic_phases {
            *p = rng.random_range(0.0..TAU);
        }
        VoiceProfile {
            fundamentals,
            formant_centers: [
                rng.random_range(400.0..1200.0),
                rng.random_range(1500.0..3200.0),
            ],
            formant_widths: [rng.random_range(80.0..200.0), rng.random_range(150.0..350.0)],
            formant_gains: [rng.random_range(0.7..1.3), rng.random_range(0.4..1.0)],
            harmonic_phases,
        }
    }

    /// Spectral envelope: two Gaussian peaks over a small base level.
    fn envelope(&self, freq: f64) -> f64 {
        let mut e = 0.08;
        for j in 0..2 {
            let d = (freq - self.formant_centers[j]) / self.formant_widths[j];
            e += self.formant_gains[j] * (-0.5 * d * d).exp();
        }
        e
    }
}

/// Synthesizes one utterance for a derived voice.
fn synthesize_utterance(profile: &VoiceProfile, seed: u64, s: usize, u: usize) -> WavClip {
    let mut rng = sub_rng(seed, &format!("utt:{s}:{u}"));
    let f0 = profile.fundamentals[rng.random_range(0..3)];
    let duration = rng.random_range(UTTERANCE_SECONDS[0]..UTTERANCE_SECONDS[1]);
    let n = (duration * SAMPLE_RATE as f64).round() as usize;

    // Harmonics stay below 7 kHz; the envelope and a gentle rolloff set
    // their weights, the voice profile their phases.
    let h_max = ((7000.0 / f0).floor() as usize).clamp(1, MAX_HARMONICS);
    let mut harmonics = Vec::with_capacity(h_max);
    for h in 1..=h_max {
        let freq = f0 * h as f64;
        let amp = profile.envelope(freq) / (h as f64).sqrt();
        harmonics.push((freq, amp, profile.harmonic_phases[h - 1]));
    }

    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            harmonics
                .iter()
                .map(|&(freq, amp, phase)| amp * (TAU * freq * t + phase).sin())
                .sum()
        })
        .collect();

    // Normalize to a fixed loudness, but never past the PCM range.
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = (0.15 / rms).min(0.9 / peak);
    let noise_std = 0.15_f64.min(scale * rms) / 10f64.powf(NOISE_SNR_DB / 20.0);
    let noise = Normal::new(0.0, noise_std).expect("finite noise level");
    for v in &mut samples {
        *v = (*v * scale + noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    WavClip::new(SAMPLE_RATE, samples).expect("synthesis yields a valid clip")
}

/// Generates `num_speakers x utterances_per_speaker` WAV files under
/// `dir`, plus a `manifest.csv` whose wav paths are relative so the corpus
/// directory can move. The returned manifest holds the absolute paths for
/// immediate use.
pub fn generate_corpus(
    dir: &Path,
    num_speakers: usize,
    utterances_per_speaker: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if num_speakers == 0 || utterances_per_speaker == 0 {
        return Err(Error::Config(
            "corpus needs at least one speaker and one utterance".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut relative = Vec::new();
    let mut absolute = Vec::new();
    for s in 0..num_speakers {
        let profile = VoiceProfile::derive(seed, s, num_speakers);
        for u in 0..utterances_per_speaker {
            let clip = synthesize_utterance(&profile, seed, s, u);
            let name = format!("spk{s:03}_utt{u:03}.wav");
            let path = dir.join(&name);
            std::fs::write(&path, write_wav(&clip)).map_err(|e| Error::io(&path, e))?;
            let duration_s = clip.len() as f64 / SAMPLE_RATE as f64;
            let speaker_id = format!("spk{s:03}");
            relative.push(ManifestEntry {
                speaker_id: speaker_id.clone(),
                wav_path: name.into(),
                duration_s,
            });
            absolute.push(ManifestEntry {
                speaker_id,
                wav_path: path,
                duration_s,
            });
        }
    }
    DatasetManifest::new(relative)?.write(&dir.join("manifest.csv"))?;
    DatasetManifest::new(absolute)
}

/// Mean magnitude spectrum over non-overlapping windows: bin `k` holds the
/// average `|DFT_k|` across windows, for `k < bins`. Plain direct DFT;
/// meant for corpus inspection, not bulk processing.
pub fn mean_magnitude_spectrum(samples: &[f64], window: usize, bins: usize) -> Result<Vec<f64>> {
    if window == 0 || bins == 0 || bins > window / 2 {
        return Err(Error::Config(format!(
            "want 0 < bins <= window/2, got window {window}, bins {bins}"
        )));
    }
    if samples.len() < window {
        return Err(Error::InsufficientAudio(format!(
            "{} samples cannot fill a {window}-sample window",
            samples.len()
        )));
    }
    let windows = samples.len() / window;
    let mut spectrum = vec![0.0; bins];
    for w in 0..windows {
        let frame = &samples[w * window..(w + 1) * window];
        for (k, out) in spectrum.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            let step = TAU * k as f64 / window as f64;
            for (i, &x) in frame.iter().enumerate() {
                let angle = step * i as f64;
                re += x * angle.cos();
                im -= x * angle.sin();
            }
            *out += (re * re + im * im).sqrt();
        }
    }
    for v in &mut spectrum {
        *v /= windows as f64;
    }
    Ok(spectrum)
}

/// Euclidean distance between two equal-length spectra.
pub fn spectral_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fewshot::load_wav;

    #[test]
    fn corpus_has_the_declared_row_count_and_durations() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 3, 4, 5).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.speakers().len(), 3);
        for e in m.entries() {
            assert!(e.duration_s >= 4.0, "{} too short", e.wav_path.display());
            let clip = load_wav(&e.wav_path).unwrap();
            assert_eq!(
                clip.len(),
                (e.duration_s * SAMPLE_RATE as f64).round() as usize
            );
        }
    }

    #[test]
    fn same_seed_writes_bitwise_identical_files() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_corpus(dir_a.path(), 2, 3, 9).unwrap();
        let b = generate_corpus(dir_b.path(), 2, 3, 9).unwrap();
        for (ea, eb) in a.entries().iter().zip(b.entries()) {
            let bytes_a = std::fs::read(&ea.wav_path).unwrap();
            let bytes_b = std::fs::read(&eb.wav_path).unwrap();
            assert_eq!(bytes_a, bytes_b, "{}", ea.wav_path.display());
        }
        // Manifests are relative, so they match across directories too.
        assert_eq!(
            std::fs::read(dir_a.path().join("manifest.csv")).unwrap(),
            std::fs::read(dir_b.path().join("manifest.csv")).unwrap()
        );
        let dir_c = tempfile::tempdir().unwrap();
        let c = generate_corpus(dir_c.path(), 2, 3, 10).unwrap();
        let first_a = std::fs::read(&a.entries()[0].wav_path).unwrap();
        let first_c = std::fs::read(&c.entries()[0].wav_path).unwrap();
        assert_ne!(first_a, first_c);
    }

    #[test]
    fn written_manifest_resolves_and_matches_the_returned_one() {
        let dir = tempfile::tempdir().unwrap();
        let returned = generate_corpus(dir.path(), 2, 2, 3).unwrap();
        let read_back = DatasetManifest::read(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(read_back, returned);
    }

    #[test]
    fn speakers_separate_in_mean_spectrum() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 3, 2, 7).unwrap();
        let mut spectra = Vec::new();
        for s in m.speakers() {
            let mut mean: Option<Vec<f64>> = None;
            let entries = m.entries_for(&s);
            for e in &entries {
                let clip = load_wav(&e.wav_path).unwrap();
                let spec = mean_magnitude_spectrum(clip.samples(), 1024, 256).unwrap();
                mean = Some(match mean {
                    None => spec,
                    Some(acc) => acc.iter().zip(&spec).map(|(a, b)| a + b).collect(),
                });
            }
            let mut mean = mean.unwrap();
            for v in &mut mean {
                *v /= entries.len() as f64;
            }
            spectra.push(mean);
        }
        for i in 0..spectra.len() {
            for j in i + 1..spectra.len() {
                assert!(
                    spectral_distance(&spectra[i], &spectra[j]) > 0.0,
                    "speakers {i} and {j} have identical mean spectra"
                );
            }
        }
    }

    #[test]
    fn samples_stay_inside_pcm_range() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), 1, 2, 11).unwrap();
        for e in m.entries() {
            let clip = load_wav(&e.wav_path).unwrap();
            assert!(clip.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_corpus(dir.path(), 0, 3, 1).is_err());
        assert!(generate_corpus(dir.path(), 3, 0, 1).is_err());
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("occupied");
        std::fs::write(&blocker, b"file, not a directory").unwrap();
        assert!(matches!(
            generate_corpus(&blocker.join("sub"), 1, 1, 1),
            Err(Error::Io { .. })
        ));
    }
}
