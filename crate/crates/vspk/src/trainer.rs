//! The optimization loop: batched composite-loss training with seeded
//! shuffling, SGD or Adam steps, center updates, and a per-epoch history.
//!
//! Determinism is the load-bearing property. Every random choice (clip
//! offsets, epoch order) comes from a named generator derived from the run
//! seed, batches drop the incomplete tail, and parameters update in a fixed
//! order, so one (seed, data, config) triple pins every logged loss and the
//! final parameter bits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{extract_clip, stack_volumes, Framing, Volume, WavClip};
use crate::error::{Error, Result};
use crate::fewshot::{load_wav, DatasetManifest};
use crate::losses::{
    self, CenterBank, LossBreakdown, LAMBDA,
};
use crate::network::{
    classifier_logits, forward_embeddings, register_params, ClassifierHead, EmbeddingNet,
    NetConfig,
};
use crate::seeding::sub_rng;
use crate::tensor::{Mode, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameter update rule. Adam is the default; SGD stays for analytic
/// step tests and ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?}, expected sgd or adam"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 90,
            batch_size: 32,
            learning_rate: 0.001,
            lambda: LAMBDA,
            seed: 42,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-tensor moment buffers for Adam; empty for SGD. The step counter is
/// shared by all tensors so bias correction stays aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: Optimizer,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, sizes: &[usize]) -> Self {
        let (first, second) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam => (
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
                sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ),
        };
        OptimizerState {
            kind,
            step: 0,
            first,
            second,
        }
    }
}

/// Applies one update to every named parameter. SGD: `w -= lr*g`. Adam:
/// bias-corrected moment update. Rejects non-finite gradients before
/// touching any parameter and non-finite parameters after.
pub fn optimizer_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} for {name} of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    match state.kind {
        Optimizer::Sgd => {
            for ((_, p), g) in params.iter_mut().zip(grads) {
                for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= learning_rate * gv;
                }
            }
        }
        Optimizer::Adam => {
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
                let (m, v) = (&mut state.first[i], &mut state.second[i]);
                for (k, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gv;
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gv * gv;
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    *w -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    for (name, p) in params.iter() {
        if !p.all_finite() {
            return Err(Error::Numeric(format!(
                "optimizer step produced a non-finite value in {name}"
            )));
        }
    }
    Ok(())
}

/// One epoch's logged metrics. `total` is derived from the other three
/// through the single combining expression, so the composite-loss identity
/// holds bit-for-bit on every record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_c: f64,
    pub l_bs: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

/// Everything a finished run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub net: EmbeddingNet,
    pub head: ClassifierHead,
    pub centers: CenterBank,
    pub history: Vec<EpochRecord>,
}

/// Adds epoch/batch context to numeric failures; other errors pass through
/// so their kind stays inspectable.
fn batch_context(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Numeric(msg) => {
            Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}"))
        }
        other => other,
    }
}

/// Trains the embedding network on every manifest utterance.
///
/// Every epoch cuts a fresh fixed-length clip from each utterance, so the
/// network sees a new alignment of the same material on every pass instead
/// of memorizing one crop. Offset streams are keyed by file name with one
/// draw per epoch; each epoch shuffles the volume order with its own named
/// generator and drops the incomplete trailing batch. Center updates
/// follow each optimizer step.
pub fn train(
    manifest: &DatasetManifest,
    framing: &Framing,
    clip_duration_s: f64,
    net_config: NetConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::Contract(format!(
            "training needs at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    let speaker_index: BTreeMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut init_rng = sub_rng(config.seed, "init");
    let mut net = EmbeddingNet::init(net_config, &mut init_rng)?;
    let embedding_dim = net.config.embedding_dim;
    let mut head = ClassifierHead::init(speakers.len(), embedding_dim, &mut init_rng)?;
    let mut centers =
        CenterBank::new(speakers.len(), embedding_dim, losses::CENTER_UPDATE_RATE)?;

    // Clips stay whole in memory and are re-cropped every epoch. The
    // offset stream is keyed by file name so it does not depend on where
    // the corpus directory lives.
    let mut clips: Vec<(WavClip, usize)> = Vec::with_capacity(manifest.len());
    let mut offset_rngs = Vec::with_capacity(manifest.len());
    for entry in manifest.entries() {
        let stem = entry
            .wav_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let clip = load_wav(&entry.wav_path)?;
        let needed = (clip_duration_s * clip.sample_rate() as f64).round() as usize;
        if clip.len() < needed {
            return Err(Error::InsufficientAudio(format!(
                "{}: {} samples, clips of {clip_duration_s} s need {needed}",
                entry.wav_path.display(),
                clip.len()
            )));
        }
        let shape = framing.volume_shape(needed)?;
        if shape != net.config.input {
            return Err(Error::Contract(format!(
                "{} frames into volume {:?}, network expects {:?}",
                entry.wav_path.display(),
                shape,
                net.config.input
            )));
        }
        offset_rngs.push(sub_rng(config.seed, &format!("clip:{stem}")));
        clips.push((clip, speaker_index[entry.speaker_id.as_str()]));
    }

    if config.epochs > 0 {
        if config.batch_size < 2 {
            return Err(Error::Config(
                "batch normalization needs batches of at least 2".into(),
            ));
        }
        if clips.len() < config.batch_size {
            return Err(Error::Contract(format!(
                "batch size {} exceeds the {} usable utterances",
                config.batch_size,
                clips.len()
            )));
        }
    }

    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = net.params.named().iter().map(|(_, t)| t.len()).collect();
        s.push(head.weight.len());
        s.push(head.bias.len());
        s
    };
    let mut opt_state = OptimizerState::new(config.optimizer, &sizes);

    let mut history = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let mut volumes: Vec<(Volume, usize)> = Vec::with_capacity(clips.len());
        for ((clip, label), rng) in clips.iter().zip(&mut offset_rngs) {
            let cut = extract_clip(clip, clip_duration_s, rng)?;
            volumes.push((framing.volume(&cut)?, *label));
        }
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        order.shuffle(&mut sub_rng(config.seed, &format!("epoch:{e}")));

        let batches = volumes.len() / config.batch_size;
        let (mut sum_ce, mut sum_c, mut sum_bs) = (0.0, 0.0, 0.0);
        let mut correct = 0usize;
        for b in 0..batches {
            let members = &order[b * config.batch_size..(b + 1) * config.batch_size];
            let batch: Vec<&Volume> = members.iter().map(|&i| &volumes[i].0).collect();
            let labels: Vec<usize> = members.iter().map(|&i| volumes[i].1).collect();
            let breakdown = train_batch(
                &mut net, &mut head, &mut centers, &mut opt_state, config, &batch, &labels,
                &mut correct,
            )
            .map_err(|err| batch_context(err, e + 1, b + 1))?;
            sum_ce += breakdown.l_ce;
            sum_c += breakdown.l_c;
            sum_bs += breakdown.l_bs;
        }
        let nb = batches as f64;
        let epoch_losses =
            losses::combined_loss(sum_ce / nb, sum_c / nb, sum_bs / nb, config.lambda)
                .map_err(|err| batch_context(err, e + 1, 0))?;
        history.push(EpochRecord {
            epoch: e + 1,
            l_ce: epoch_losses.l_ce,
            l_c: epoch_losses.l_c,
            l_bs: epoch_losses.l_bs,
            total: epoch_losses.total,
            train_accuracy: correct as f64 / (batches * config.batch_size) as f64,
        });
    }

    Ok(TrainOutput {
        net,
        head,
        centers,
        history,
    })
}

/// Forward, composite loss, backward, optimizer step, center update for
/// one batch. Returns the batch's loss breakdown and bumps `correct` by
/// the number of argmax hits.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    net: &mut EmbeddingNet,
    head: &mut ClassifierHead,
    centers: &mut CenterBank,
    opt_state: &mut OptimizerState,
    config: &TrainConfig,
    batch: &[&Volume],
    labels: &[usize],
    correct: &mut usize,
) -> Result<LossBreakdown> {
    let stacked = stack_volumes_ref(batch)?;
    let mut tape = Tape::new();
    let nodes = register_params(&mut tape, &net.params, true);
    let w_id = tape.leaf(&head.weight);
    let b_id = tape.leaf(&head.bias);
    let input = tape.constant(&stacked);

    let emb = forward_embeddings(
        &mut tape,
        &net.config,
        &nodes,
        input,
        Mode::Train,
        &mut net.running,
    )?;
    let logits = classifier_logits(&mut tape, emb, w_id, b_id)?;

    // Backward frees intermediate values, so copy what survives the batch.
    let embeddings = tape.tensor(emb);
    let logit_rows = tape.tensor(logits);

    let l_ce = losses::cross_entropy(&mut tape, logits, labels)?;
    let l_c = losses::center_loss(&mut tape, emb, labels, centers)?;
    let l_bs = losses::speaker_bias_loss(&mut tape, w_id)?;
    let (total, breakdown) =
        losses::combined_loss_node(&mut tape, l_ce, l_c, l_bs, config.lambda)?;
    tape.backward(total)?;

    let mut grads = Vec::new();
    for id in nodes
        .kernels
        .iter()
        .zip(&nodes.conv_biases)
        .zip(nodes.gammas.iter().zip(&nodes.betas))
        .flat_map(|((k, cb), (g, be))| [*k, *cb, *g, *be])
    {
        grads.push(tape.grad(id));
    }
    grads.push(tape.grad(nodes.dense_w));
    grads.push(tape.grad(nodes.dense_b));
    grads.push(tape.grad(w_id));
    grads.push(tape.grad(b_id));

    let mut params = net.params.named_mut();
    params.push(("head.weight".into(), &mut head.weight));
    params.push(("head.bias".into(), &mut head.bias));
    optimizer_step(&mut params, &grads, opt_state, config.learning_rate)?;

    losses::update_centers(centers, &embeddings, labels)?;

    let s = head.num_speakers();
    for (i, &y) in labels.iter().enumerate() {
        let row = &logit_rows.data()[i * s..(i + 1) * s];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(j, _)| j)
            .expect("at least one class");
        if pred == y {
            *correct += 1;
        }
    }
    Ok(breakdown)
}

/// Stacks borrowed volumes into one `[n, ...]` tensor.
fn stack_volumes_ref(batch: &[&Volume]) -> Result<Tensor> {
    let owned: Vec<Volume> = batch.iter().map(|v| (*v).clone()).collect();
    stack_volumes(&owned)
}

/// Writes the history as one JSON object per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for record in history {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Format(format!("history record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a history log written by [`write_history`]. JSON float
/// round-tripping is exact, so the loss identity survives the file.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut history = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("history line {}: {e}", i + 1)))?;
        history.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, WavClip, SAMPLE_RATE};
    use crate::fewshot::ManifestEntry;
    use std::f64::consts::TAU;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_step_matches_hand_arithmetic() {
        let mut w = scalar_param(1.0);
        let g = scalar_param(2.0);
        let mut state = OptimizerState::new(Optimizer::Sgd, &[1]);
        let mut params = vec![("w".to_string(), &mut w)];
        optimizer_step(&mut params, &[g], &mut state, 0.1).unwrap();
        assert_eq!(w.data()[0], 0.8);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        for kind in [Optimizer::Sgd, Optimizer::Adam] {
            let mut w = scalar_param(0.37);
            let g = scalar_param(0.0);
            let mut state = OptimizerState::new(kind, &[1]);
            let mut params = vec![("w".to_string(), &mut w)];
            optimizer_step(&mut params, &[g], &mut state, 0.1).unwrap();
            assert!((w.data()[0] - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_matches_scalar_simulation_and_converges() {
        // Independent simulation of bias-corrected Adam on f(w) = w^2.
        let lr = 0.1;
        let mut sim_w = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        let mut w = scalar_param(1.0);
        let mut state = OptimizerState::new(Optimizer::Adam, &[1]);
        for t in 1..=200 {
            let g = 2.0 * sim_w;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            sim_w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);

            let g_tensor = scalar_param(2.0 * w.data()[0]);
            let mut params = vec![("w".to_string(), &mut w)];
            optimizer_step(&mut params, &[g_tensor], &mut state, lr).unwrap();
            assert_eq!(w.data()[0], sim_w, "diverged from oracle at step {t}");
        }
        assert!(w.data()[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_the_parameter_name() {
        let mut w = scalar_param(1.0);
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut state = OptimizerState::new(Optimizer::Adam, &[1]);
        let mut params = vec![("block0.gamma".to_string(), &mut w)];
        let err = optimizer_step(&mut params, &[g], &mut state, 0.1).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("block0.gamma")),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert_eq!(w.data()[0], 1.0);
    }

    #[test]
    fn optimizer_names_come_back_from_strings() {
        assert_eq!("adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
        assert_eq!("sgd".parse::<Optimizer>().unwrap(), Optimizer::Sgd);
        assert!("momentum".parse::<Optimizer>().is_err());
        assert_eq!(Optimizer::Adam.to_string(), "adam");
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 90);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.lambda, 0.003);
        assert_eq!(cfg.optimizer, Optimizer::Adam);
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lambda: -0.1,
            ..cfg
        }
        .validate()
        .is_err());
    }

    // ---- end-to-end loop on a tiny tone corpus ------------------------

    /// 0.2 s tone corpus with per-speaker fundamentals; amplitude 0 writes
    /// silence.
    fn make_corpus(
        dir: &Path,
        speakers: usize,
        utterances: usize,
        amplitude: f64,
    ) -> DatasetManifest {
        let mut entries = Vec::new();
        for s in 0..speakers {
            for u in 0..utterances {
                let freq = 150.0 + 90.0 * s as f64 + 5.0 * u as f64;
                let samples: Vec<f64> = (0..3200)
                    .map(|i| amplitude * (TAU * freq * i as f64 / 16_000.0).sin())
                    .collect();
                let clip = WavClip::new(SAMPLE_RATE, samples).unwrap();
                let path = dir.join(format!("s{s:02}_u{u:02}.wav"));
                std::fs::write(&path, write_wav(&clip)).unwrap();
                entries.push(ManifestEntry {
                    speaker_id: format!("s{s:02}"),
                    wav_path: path,
                    duration_s: 0.2,
                });
            }
        }
        DatasetManifest::new(entries).unwrap()
    }

    const TEST_DURATION: f64 = 0.064;
    fn test_framing() -> Framing {
        Framing {
            window: 64,
            hop: 64,
            patch_rows: 8,
        }
    }
    fn test_net_config() -> NetConfig {
        NetConfig::reduced([16, 8, 8, 1], [3, 4, 5], 6)
    }
    fn quick_config(epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate: 0.01,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_network_and_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 2, 0.6);
        let out = train(
            &m,
            &test_framing(),
            TEST_DURATION,
            test_net_config(),
            &quick_config(0, 4),
        )
        .unwrap();
        assert!(out.history.is_empty());
        let again = train(
            &m,
            &test_framing(),
            TEST_DURATION,
            test_net_config(),
            &quick_config(0, 4),
        )
        .unwrap();
        assert_eq!(out.net, again.net);
        assert_eq!(out.head, again.head);
    }

    #[test]
    fn same_seed_reproduces_parameters_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 3, 4, 0.6);
        let run = || {
            train(
                &m,
                &test_framing(),
                TEST_DURATION,
                test_net_config(),
                &quick_config(2, 4),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
        assert_eq!(a.head, b.head);
        assert_eq!(a.centers, b.centers);
        let c = train(
            &m,
            &test_framing(),
            TEST_DURATION,
            test_net_config(),
            &TrainConfig {
                seed: 8,
                ..quick_config(2, 4)
            },
        )
        .unwrap();
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn training_reduces_the_composite_loss() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 3, 4, 0.6);
        let out = train(
            &m,
            &test_framing(),
            TEST_DURATION,
            test_net_config(),
            &quick_config(6, 6),
        )
        .unwrap();
        assert_eq!(out.history.len(), 6);
        let first = out.history.first().unwrap().total;
        let last = out.history.last().unwrap().total;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn every_history_record_satisfies_the_loss_identity_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 3, 3, 0.6);
        let cfg = quick_config(3, 4);
        let out = train(&m, &test_framing(), TEST_DURATION, test_net_config(), &cfg).unwrap();
        for r in &out.history {
            let recombined = (r.l_ce + cfg.lambda * r.l_c) + r.l_bs;
            assert_eq!(r.total.to_bits(), recombined.to_bits());
            assert!((0.0..=1.0).contains(&r.train_accuracy));
        }
    }

    #[test]
    fn history_survives_the_jsonl_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 3, 0.6);
        let out = train(
            &m,
            &test_framing(),
            TEST_DURATION,
            test_net_config(),
            &quick_config(2, 4),
        )
        .unwrap();
        let path = dir.path().join("history.jsonl");
        write_history(&path, &out.history).unwrap();
        let back = read_history(&path).unwrap();
        assert_eq!(back.len(), out.history.len());
        for (a, b) in out.history.iter().zip(&back) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.l_ce.to_bits(), b.l_ce.to_bits());
            assert_eq!(a.l_c.to_bits(), b.l_c.to_bits());
            assert_eq!(a.l_bs.to_bits(), b.l_bs.to_bits());
        }
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["epoch", "l_ce", "l_c", "l_bs", "total", "train_accuracy"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
        }
    }

    #[test]
    fn silent_corpus_aborts_with_epoch_and_batch_context() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 3, 0.0);
        let err = train(
            &m,
            &test_framing(),
            TEST_DURATION,
            test_net_config(),
            &quick_config(1, 4),
        )
        .unwrap_err();
        match err {
            Error::Numeric(msg) => {
                assert!(msg.contains("epoch 1"), "missing context: {msg}")
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn batch_larger_than_corpus_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 2, 0.6);
        assert!(matches!(
            train(
                &m,
                &test_framing(),
                TEST_DURATION,
                test_net_config(),
                &quick_config(1, 16),
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_speaker_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 4, 0.6);
        assert!(matches!(
            train(
                &m,
                &test_framing(),
                TEST_DURATION,
                test_net_config(),
                &quick_config(1, 2),
            ),
            Err(Error::Contract(_))
        ));
    }
}
