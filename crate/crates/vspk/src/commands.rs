//! The operator-facing pipeline steps behind the CLI subcommands.
//!
//! Each step reads files, runs one stage, and writes its outputs under a
//! fixed name, atomically (temp sibling + rename), so a crashed run never
//! leaves a half-written artifact behind. Every step is a pure function of
//! its inputs and the seed; reruns reproduce outputs byte for byte.
//!
//! Clip offsets for enrollment, probes, and verification are keyed by file
//! name (`clip:<name>`), so the same file always yields the same cut. A
//! probe identical to the enrollment file therefore scores exactly 0.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::extract_clip;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fewshot::{
    build_trials, enroll, load_wav, read_trials, sample_support, write_trials, DatasetManifest,
    SupportSet, TrialPair,
};
use crate::metrics::{compute_eer, det_points, write_det, write_scores, Label, ScoreSet};
use crate::network::embedding_distance;
use crate::seeding::sub_rng;
use crate::synth::generate_corpus;
use crate::tensor::{Mode, Tensor};
use crate::trainer::{train, write_history};

/// Runs `write` against a temporary sibling, then renames over `path`.
fn replace_with<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?
        .to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    write(&tmp).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Seeded clip cut for one file, keyed by its name.
fn cut_clip(path: &Path, duration_s: f64, seed: u64) -> Result<crate::audio::WavClip> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let clip = load_wav(path)?;
    extract_clip(&clip, duration_s, &mut sub_rng(seed, &format!("clip:{name}")))
}

#[derive(Debug)]
pub struct SynthReport {
    pub manifest: PathBuf,
    pub speakers: usize,
    pub utterances: usize,
}

/// Generates the synthetic corpus and its manifest under `out_dir`.
pub fn cmd_synth(
    out_dir: &Path,
    num_speakers: usize,
    utterances_per_speaker: usize,
    seed: u64,
) -> Result<SynthReport> {
    let manifest = generate_corpus(out_dir, num_speakers, utterances_per_speaker, seed)?;
    Ok(SynthReport {
        manifest: out_dir.join("manifest.csv"),
        speakers: manifest.speakers().len(),
        utterances: manifest.len(),
    })
}

#[derive(Debug)]
pub struct PrepareReport {
    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub trials: usize,
}

/// Splits a manifest by speaker and writes `train.csv`, `eval.csv`, and
/// `trials.txt` under `out_dir`.
///
/// Trial probe pools exclude the support files the evaluation step will
/// pick: support selection is a pure function of (seed, manifest), so this
/// step replays it per speaker.
pub fn cmd_prepare(manifest_path: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<PrepareReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::read(manifest_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (train_m, eval_m) =
        crate::fewshot::split_dataset(&manifest, cfg.train_fraction, &mut sub_rng(cfg.seed, "split"))?;

    let mut support_paths = BTreeSet::new();
    for speaker in eval_m.speakers() {
        let support = sample_support(
            &eval_m,
            &speaker,
            cfg.shots,
            cfg.duration_s,
            &mut sub_rng(cfg.seed, &format!("support:{speaker}")),
        )?;
        support_paths.extend(support.sources);
    }
    let trials = build_trials(
        &eval_m,
        cfg.probes_per_speaker,
        cfg.impostor_ratio,
        &mut sub_rng(cfg.seed, "trials"),
        &support_paths,
    )?;

    replace_with(&out_dir.join("train.csv"), |tmp| train_m.write(tmp))?;
    replace_with(&out_dir.join("eval.csv"), |tmp| eval_m.write(tmp))?;
    replace_with(&out_dir.join("trials.txt"), |tmp| write_trials(tmp, &trials))?;
    Ok(PrepareReport {
        train_speakers: train_m.speakers().len(),
        eval_speakers: eval_m.speakers().len(),
        trials: trials.len(),
    })
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: usize,
    pub final_total: Option<f64>,
}

/// Trains on a manifest and writes `model.ckpt` and `training_log.jsonl`
/// under `out_dir`.
pub fn cmd_train(train_manifest: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let manifest = DatasetManifest::read(train_manifest)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let output = train(
        &manifest,
        &cfg.framing(),
        cfg.duration_s,
        cfg.net_config()?,
        &cfg.train_config(),
    )?;
    let checkpoint = Checkpoint {
        net: output.net,
        head: output.head,
        centers: output.centers,
        train_config: cfg.train_config(),
        framing: cfg.framing(),
        clip_duration_s: cfg.duration_s,
        epoch: cfg.epochs,
        last_record: output.history.last().copied(),
    };
    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("training_log.jsonl");
    replace_with(&ckpt_path, |tmp| save_checkpoint(tmp, &checkpoint))?;
    replace_with(&log_path, |tmp| write_history(tmp, &output.history))?;
    Ok(TrainReport {
        checkpoint: ckpt_path,
        log: log_path,
        epochs: cfg.epochs,
        final_total: output.history.last().map(|r| r.total),
    })
}

#[derive(Debug)]
pub struct EvalReport {
    pub eer: f64,
    pub threshold: f64,
    pub genuine: usize,
    pub impostor: usize,
    pub scores: PathBuf,
    pub det: PathBuf,
    pub summary: PathBuf,
}

/// Enrolls every claimed speaker from the trial list, scores all trials,
/// and writes `scores.tsv`, `det.csv`, and `summary.txt` under `out_dir`.
pub fn cmd_eval(
    checkpoint_path: &Path,
    eval_manifest: &Path,
    trials_path: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let eval_m = DatasetManifest::read(eval_manifest)?;
    let trials = read_trials(trials_path)?;
    if trials.is_empty() {
        return Err(Error::UndefinedMetric("the trial list is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // The model's own framing and clip length; config cannot reshape a
    // trained network.
    let claimed: BTreeSet<&str> = trials.iter().map(|t| t.enroll_speaker.as_str()).collect();
    let mut models: BTreeMap<&str, Tensor> = BTreeMap::new();
    for speaker in claimed {
        let support = sample_support(
            &eval_m,
            speaker,
            cfg.shots,
            ckpt.clip_duration_s,
            &mut sub_rng(cfg.seed, &format!("support:{speaker}")),
        )?;
        models.insert(speaker, enroll(&ckpt.net, &support, &ckpt.framing)?);
    }

    let mut probe_cache: BTreeMap<&Path, Tensor> = BTreeMap::new();
    let mut scores = ScoreSet::new(Vec::new())?;
    for (i, trial) in trials.iter().enumerate() {
        let context = |e: Error| {
            Error::Contract(format!(
                "trial {} ({} {} {}): {e}",
                i + 1,
                trial.label,
                trial.enroll_speaker,
                trial.probe_path.display()
            ))
        };
        let probe = match probe_cache.get(trial.probe_path.as_path()) {
            Some(e) => e.clone(),
            None => {
                let cut = cut_clip(&trial.probe_path, ckpt.clip_duration_s, cfg.seed)
                    .map_err(context)?;
                let volume = ckpt.framing.volume(&cut).map_err(context)?;
                let emb = ckpt.net.embed(&volume, Mode::Eval).map_err(context)?;
                probe_cache.insert(trial.probe_path.as_path(), emb.clone());
                emb
            }
        };
        let enrolled = &models[trial.enroll_speaker.as_str()];
        // 0.0 - d keeps a zero distance at +0 rather than -0.
        scores.push(0.0 - embedding_distance(enrolled, &probe), trial.label)?;
    }

    let (eer, threshold) = compute_eer(&scores)?;
    let points = det_points(&scores)?;
    let scores_path = out_dir.join("scores.tsv");
    let det_path = out_dir.join("det.csv");
    let summary_path = out_dir.join("summary.txt");
    replace_with(&scores_path, |tmp| write_scores(tmp, &scores))?;
    replace_with(&det_path, |tmp| write_det(tmp, &points))?;
    let genuine = scores
        .entries()
        .iter()
        .filter(|(_, l)| *l == Label::Genuine)
        .count();
    let impostor = scores.entries().len() - genuine;
    let summary = format!(
        "eer_percent = {}\nthreshold = {}\ngenuine_trials = {genuine}\nimpostor_trials = {impostor}\n",
        eer * 100.0,
        threshold
    );
    replace_with(&summary_path, |tmp| {
        std::fs::write(tmp, &summary).map_err(|e| Error::io(tmp, e))
    })?;
    Ok(EvalReport {
        eer,
        threshold,
        genuine,
        impostor,
        scores: scores_path,
        det: det_path,
        summary: summary_path,
    })
}

/// A persisted enrolled speaker: the unit-norm centroid embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub speaker_id: String,
    pub embedding: Vec<f64>,
}

/// Builds a support set from explicit WAV files, cutting each by its
/// name-keyed seeded offset.
fn support_from_files(
    speaker_id: &str,
    wavs: &[PathBuf],
    duration_s: f64,
    seed: u64,
) -> Result<SupportSet> {
    let mut clips = Vec::with_capacity(wavs.len());
    for path in wavs {
        clips.push(cut_clip(path, duration_s, seed)?);
    }
    SupportSet::new(speaker_id.to_string(), clips, wavs.to_vec())
}

/// Enrolls a speaker from K WAV files and writes the model as JSON.
pub fn cmd_enroll(
    checkpoint_path: &Path,
    speaker_id: &str,
    wavs: &[PathBuf],
    out_path: &Path,
    cfg: &RunConfig,
) -> Result<SpeakerModel> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let support = support_from_files(speaker_id, wavs, ckpt.clip_duration_s, cfg.seed)?;
    let embedding = enroll(&ckpt.net, &support, &ckpt.framing)?;
    let model = SpeakerModel {
        speaker_id: speaker_id.to_string(),
        embedding: embedding.data().to_vec(),
    };
    let json = serde_json::to_string_pretty(&model)
        .map_err(|e| Error::Format(format!("speaker model: {e}")))?;
    replace_with(out_path, |tmp| {
        std::fs::write(tmp, &json).map_err(|e| Error::io(tmp, e))
    })?;
    Ok(model)
}

#[derive(Debug)]
pub struct VerifyOutcome {
    pub score: f64,
    pub accept: bool,
}

/// Enrolls from K WAV files, scores the probe, and decides:
/// `score >= threshold` accepts.
pub fn cmd_verify(
    checkpoint_path: &Path,
    enroll_wavs: &[PathBuf],
    probe_wav: &Path,
    threshold: f64,
    cfg: &RunConfig,
) -> Result<VerifyOutcome> {
    if !threshold.is_finite() {
        return Err(Error::Config(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    let ckpt = load_checkpoint(checkpoint_path)?;
    let support = support_from_files("claimed", enroll_wavs, ckpt.clip_duration_s, cfg.seed)?;
    let enrolled = enroll(&ckpt.net, &support, &ckpt.framing)?;
    let cut = cut_clip(probe_wav, ckpt.clip_duration_s, cfg.seed)?;
    let volume = ckpt.framing.volume(&cut)?;
    let score = crate::fewshot::verify(&ckpt.net, &enrolled, &volume)?;
    Ok(VerifyOutcome {
        score,
        accept: score >= threshold,
    })
}

/// Re-exported trial type for callers that post-process trial lists.
pub type Trial = TrialPair;
