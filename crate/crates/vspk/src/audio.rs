//! WAV ingestion and the waveform-to-volume shaping the network consumes.
//!
//! Only RIFF/WAVE with 16-bit mono PCM is accepted. Sample values map to
//! `s / 32768`, so parsing a written file reproduces the original samples
//! up to one quantization step. No resampling and no amplitude
//! normalization happen here; batch normalization inside the network owns
//! scale.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical sample rate. Files at other rates are rejected by the
/// dataset pipeline rather than resampled.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform with every sample in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WavClip {
    sample_rate: u32,
    samples: Vec<f64>,
}

impl WavClip {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Format("clip holds no samples".into()));
        }
        if let Some(&bad) = samples.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::Format(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(WavClip {
            sample_rate,
            samples,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A clip reshaped into the stacked-frame volume the network consumes:
/// `[frames, patch_rows, patch_cols, 1]`, where each frame is one analysis
/// window laid out row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub frames: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub channels: usize,
    pub data: Tensor,
}

/// Window/hop/patch parameters shared by every stage that shapes audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Framing {
    pub window: usize,
    pub hop: usize,
    pub patch_rows: usize,
}

impl Default for Framing {
    /// 25 ms windows with 10 ms hop at 16 kHz, reshaped 20x20.
    fn default() -> Self {
        Framing {
            window: 400,
            hop: 160,
            patch_rows: 20,
        }
    }
}

impl Framing {
    pub fn volume(&self, clip: &WavClip) -> Result<Volume> {
        waveform_to_volume(clip, self.window, self.hop, self.patch_rows)
    }

    /// Volume shape produced for a clip of `samples` samples.
    pub fn volume_shape(&self, samples: usize) -> Result<[usize; 4]> {
        if self.patch_rows == 0 || !self.window.is_multiple_of(self.patch_rows) {
            return Err(Error::Config(format!(
                "window of {} samples does not divide into {} rows",
                self.window, self.patch_rows
            )));
        }
        if samples < self.window || self.hop == 0 {
            return Err(Error::InsufficientAudio(format!(
                "{samples} samples cannot fill a {}-sample window",
                self.window
            )));
        }
        Ok([
            1 + (samples - self.window) / self.hop,
            self.patch_rows,
            self.window / self.patch_rows,
            1,
        ])
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    let b: [u8; 2] = bytes
        .get(at..at + 2)
        .ok_or_else(|| Error::Truncated(format!("2 bytes at offset {at}")))?
        .try_into()
        .expect("slice length checked");
    Ok(u16::from_le_bytes(b))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b: [u8; 4] = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Truncated(format!("4 bytes at offset {at}")))?
        .try_into()
        .expect("slice length checked");
    Ok(u32::from_le_bytes(b))
}

/// Parses a RIFF/WAVE byte stream holding 16-bit mono PCM.
pub fn parse_wav(bytes: &[u8]) -> Result<WavClip> {
    if bytes.len() < 12 {
        return Err(Error::Truncated("RIFF header needs 12 bytes".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::Format(format!(
            "expected RIFF magic, found {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("RIFF form type is not WAVE".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(bytes, at + 4)? as usize;
        let body_start = at + 8;
        if body_start + size > bytes.len() {
            return Err(Error::Truncated(format!(
                "chunk {:?} declares {size} bytes, {} remain",
                String::from_utf8_lossy(id),
                bytes.len() - body_start
            )));
        }
        let body = &bytes[body_start..body_start + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Truncated("fmt chunk needs 16 bytes".into()));
                }
                fmt = Some((
                    read_u16(body, 0)?,
                    read_u16(body, 2)?,
                    read_u32(body, 4)?,
                    read_u16(body, 14)?,
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunk bodies are padded to even length.
        at = body_start + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "audio format {format}; only PCM (1) is supported"
        )));
    }
    if channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{channels} channels; only mono is supported"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{bits} bits per sample; only 16 is supported"
        )));
    }
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::Truncated("data chunk ends mid-sample".into()));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    WavClip::new(rate, samples)
}

/// Serializes a clip as 16-bit mono PCM. Samples are rounded to the
/// nearest quantization step, so a parse of the result differs from the
/// input by at most `1/32768` per sample.
pub fn write_wav(clip: &WavClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Cuts a contiguous segment of exactly `round(duration_s * sample_rate)`
/// samples at a uniformly random offset.
pub fn extract_clip(clip: &WavClip, duration_s: f64, rng: &mut ChaCha8Rng) -> Result<WavClip> {
    if duration_s.is_nan() || duration_s <= 0.0 {
        return Err(Error::Config(format!(
            "clip duration must be positive, got {duration_s}"
        )));
    }
    let n = (duration_s * clip.sample_rate as f64).round() as usize;
    if clip.samples.len() < n {
        return Err(Error::InsufficientAudio(format!(
            "need {n} samples for {duration_s} s, clip has {}",
            clip.samples.len()
        )));
    }
    let max_offset = clip.samples.len() - n;
    let offset = if max_offset == 0 {
        0
    } else {
        rng.random_range(0..=max_offset)
    };
    WavClip::new(clip.sample_rate, clip.samples[offset..offset + n].to_vec())
}

/// Slides a `window_length` window with `hop_length` over the clip and
/// reshapes each window row-major into a `patch_rows x patch_cols` patch.
/// Frame `f`, row `r`, column `c` holds
/// `samples[f * hop + r * patch_cols + c]`.
pub fn waveform_to_volume(
    clip: &WavClip,
    window_length: usize,
    hop_length: usize,
    patch_rows: usize,
) -> Result<Volume> {
    if window_length == 0 || hop_length == 0 || patch_rows == 0 {
        return Err(Error::Config(
            "window, hop, and patch rows must all be positive".into(),
        ));
    }
    if !window_length.is_multiple_of(patch_rows) {
        return Err(Error::Config(format!(
            "window of {window_length} samples does not divide into {patch_rows} rows"
        )));
    }
    if clip.samples.len() < window_length {
        return Err(Error::InsufficientAudio(format!(
            "clip of {} samples is shorter than one {window_length}-sample window",
            clip.samples.len()
        )));
    }
    let patch_cols = window_length / patch_rows;
    let frames = 1 + (clip.samples.len() - window_length) / hop_length;
    let mut data = Vec::with_capacity(frames * window_length);
    for f in 0..frames {
        data.extend_from_slice(&clip.samples[f * hop_length..f * hop_length + window_length]);
    }
    Ok(Volume {
        frames,
        patch_rows,
        patch_cols,
        channels: 1,
        data: Tensor::new(vec![frames, patch_rows, patch_cols, 1], data)?,
    })
}

/// Stacks equally shaped volumes into one `[n, frames, rows, cols, 1]`
/// batch tensor.
pub fn stack_volumes(volumes: &[Volume]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero volumes".into()))?;
    let mut data = Vec::with_capacity(volumes.len() * first.data.len());
    for v in volumes {
        if v.data.shape() != first.data.shape() {
            return Err(Error::Dimension(format!(
                "volume of shape {:?} in a batch of {:?}",
                v.data.shape(),
                first.data.shape()
            )));
        }
        data.extend_from_slice(v.data.data());
    }
    let mut shape = vec![volumes.len()];
    shape.extend_from_slice(first.data.shape());
    Tensor::new(shape, data)
}
