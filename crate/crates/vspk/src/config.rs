//! One place for every run parameter, with a flat key=value file format.
//!
//! Precedence is command-line flags over file values over built-in
//! defaults. The file format is one `key = value` per line, `#` comments,
//! and unknown keys are errors rather than silent typo sinks.

use std::path::Path;
use std::str::FromStr;

use crate::audio::{Framing, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::trainer::{Optimizer, TrainConfig};

/// Every knob of the pipeline, at its default unless a config file or a
/// flag says otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    // Audio shaping.
    pub window: usize,
    pub hop: usize,
    pub patch_rows: usize,
    // Few-shot protocol.
    pub shots: usize,
    pub duration_s: f64,
    pub train_fraction: f64,
    pub probes_per_speaker: usize,
    pub impostor_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = Framing::default();
        RunConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lambda: t.lambda,
            seed: t.seed,
            optimizer: t.optimizer,
            window: f.window,
            hop: f.hop,
            patch_rows: f.patch_rows,
            shots: 5,
            duration_s: 3.0,
            train_fraction: 0.7,
            probes_per_speaker: 10,
            impostor_ratio: 1.0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    /// The training slice of the configuration.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }

    pub fn framing(&self) -> Framing {
        Framing {
            window: self.window,
            hop: self.hop,
            patch_rows: self.patch_rows,
        }
    }

    /// Samples in one model clip.
    pub fn clip_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    /// Reference architecture over the volume this configuration shapes.
    pub fn net_config(&self) -> Result<NetConfig> {
        let input = self.framing().volume_shape(self.clip_samples())?;
        let config = NetConfig::reference(input);
        config.trace_shapes()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.window == 0 || self.hop == 0 || self.patch_rows == 0 {
            return Err(Error::Config(
                "window, hop, and patch rows must all be positive".into(),
            ));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!(
                "clip duration must be positive, got {}",
                self.duration_s
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.probes_per_speaker == 0 {
            return Err(Error::Config("need at least one probe per speaker".into()));
        }
        if !(self.impostor_ratio.is_finite() && self.impostor_ratio >= 0.0) {
            return Err(Error::Config(format!(
                "impostor ratio must be non-negative, got {}",
                self.impostor_ratio
            )));
        }
        Ok(())
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "window" => self.window = parse_value(key, value)?,
            "hop" => self.hop = parse_value(key, value)?,
            "patch_rows" => self.patch_rows = parse_value(key, value)?,
            "shots" => self.shots = parse_value(key, value)?,
            "duration_s" => self.duration_s = parse_value(key, value)?,
            "train_fraction" => self.train_fraction = parse_value(key, value)?,
            "probes_per_speaker" => self.probes_per_speaker = parse_value(key, value)?,
            "impostor_ratio" => self.impostor_ratio = parse_value(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{} line {}: expected key = value, got {raw:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
        }
        Ok(())
    }
}
