//! Dataset manifests, the speaker-level split, few-shot support sampling,
//! and verification-trial construction.
//!
//! The split is by speaker: verification quality is only meaningful on
//! speakers the network never trained on, so no speaker contributes
//! utterances to both sides. Support clips enroll a speaker; probes are
//! drawn from the remaining files, never from the support files
//! themselves. Every sampling decision is a pure function of the manifest,
//! the parameters, and a seeded generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{extract_clip, parse_wav, Framing, Volume, WavClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::network::{embedding_distance, EmbeddingNet};
use crate::tensor::{Mode, Tensor};

/// One utterance: its speaker, audio file, and duration.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub speaker_id: String,
    pub wav_path: PathBuf,
    pub duration_s: f64,
}

/// An ordered list of utterances with unique paths.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    speaker_id: String,
    wav_path: String,
    duration_s: f64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Format("manifest holds no entries".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.speaker_id.is_empty() || e.speaker_id.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "speaker id {:?} must be non-empty without whitespace",
                    e.speaker_id
                )));
            }
            if !(e.duration_s > 0.0 && e.duration_s.is_finite()) {
                return Err(Error::Format(format!(
                    "duration {} for {} must be positive",
                    e.duration_s,
                    e.wav_path.display()
                )));
            }
            if !seen.insert(e.wav_path.clone()) {
                return Err(Error::Format(format!(
                    "duplicate path {}",
                    e.wav_path.display()
                )));
            }
        }
        Ok(DatasetManifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct speaker ids in lexicographic order.
    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.speaker_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn entries_for(&self, speaker_id: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.speaker_id == speaker_id)
            .collect()
    }

    /// Reads a `speaker_id,wav_path,duration_s` CSV. Relative wav paths are
    /// resolved against the manifest's own directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::Format(format!("{}: {e}", path.display())),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut entries = Vec::new();
        for row in reader.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let wav = PathBuf::from(&row.wav_path);
            let wav_path = if wav.is_absolute() {
                wav
            } else {
                base.join(wav)
            };
            entries.push(ManifestEntry {
                speaker_id: row.speaker_id,
                wav_path,
                duration_s: row.duration_s,
            });
        }
        DatasetManifest::new(entries)
    }

    /// Writes the manifest CSV with paths exactly as stored.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        for e in &self.entries {
            writer
                .serialize(ManifestRow {
                    speaker_id: e.speaker_id.clone(),
                    wav_path: e.wav_path.to_string_lossy().into_owned(),
                    duration_s: e.duration_s,
                })
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Splits by speaker: `round(train_fraction * speakers)` speakers train,
/// the rest evaluate, membership shuffled by the generator. No speaker
/// appears on both sides.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::Contract(format!(
            "splitting needs at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    speakers.shuffle(rng);
    let n_train = ((train_fraction * speakers.len() as f64).round() as usize)
        .clamp(1, speakers.len() - 1);
    let train_set: BTreeSet<&str> = speakers[..n_train].iter().map(String::as_str).collect();
    let (train, eval): (Vec<ManifestEntry>, Vec<ManifestEntry>) = manifest
        .entries
        .iter()
        .cloned()
        .partition(|e| train_set.contains(e.speaker_id.as_str()));
    Ok((DatasetManifest::new(train)?, DatasetManifest::new(eval)?))
}

/// The clips that enroll one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub speaker_id: String,
    pub clips: Vec<WavClip>,
    /// File each clip was cut from, for probe disjointness.
    pub sources: Vec<PathBuf>,
}

impl SupportSet {
    pub fn new(speaker_id: String, clips: Vec<WavClip>, sources: Vec<PathBuf>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Contract("support set holds no clips".into()));
        }
        if clips.len() != sources.len() {
            return Err(Error::Contract(format!(
                "{} clips against {} source paths",
                clips.len(),
                sources.len()
            )));
        }
        let len = clips[0].len();
        if clips.iter().any(|c| c.len() != len) {
            return Err(Error::Contract("support clips differ in length".into()));
        }
        Ok(SupportSet {
            speaker_id,
            clips,
            sources,
        })
    }

    pub fn k(&self) -> usize {
        self.clips.len()
    }
}

/// Loads a wav file and checks the canonical sample rate.
pub fn load_wav(path: &Path) -> Result<WavClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let clip = parse_wav(&bytes)?;
    if clip.sample_rate() != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!(
            "{}: sample rate {} (the pipeline runs at {SAMPLE_RATE})",
            path.display(),
            clip.sample_rate()
        )));
    }
    Ok(clip)
}

/// Samples `k` support clips of `duration_s` seconds for one speaker,
/// choosing utterances without replacement and a random offset per clip.
pub fn sample_support(
    manifest: &DatasetManifest,
    speaker_id: &str,
    k: usize,
    duration_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SupportSet> {
    if k == 0 {
        return Err(Error::Config("support size must be at least 1".into()));
    }
    let all = manifest.entries_for(speaker_id);
    if all.is_empty() {
        return Err(Error::InsufficientData {
            speaker: speaker_id.into(),
            detail: "speaker absent from manifest".into(),
        });
    }
    let usable: Vec<&&ManifestEntry> =
        all.iter().filter(|e| e.duration_s >= duration_s).collect();
    if usable.len() < k {
        return Err(Error::InsufficientData {
            speaker: speaker_id.into(),
            detail: format!(
                "{} utterances of at least {duration_s} s, need {k}",
                usable.len()
            ),
        });
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, usable.len(), k).into_vec();
    chosen.sort_unstable();
    let mut clips = Vec::with_capacity(k);
    let mut sources = Vec::with_capacity(k);
    for idx in chosen {
        let entry = usable[idx];
        let clip = load_wav(&entry.wav_path)?;
        clips.push(extract_clip(&clip, duration_s, rng)?);
        sources.push(entry.wav_path.clone());
    }
    SupportSet::new(speaker_id.into(), clips, sources)
}

/// One verification trial: a claimed identity and a probe file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPair {
    pub enroll_speaker: String,
    pub probe_path: PathBuf,
    pub label: Label,
}

/// Builds the trial list: per eval speaker, `per_speaker_probes` genuine
/// trials cycling through that speaker's non-support files, plus
/// `round(impostor_ratio * per_speaker_probes)` impostor trials with
/// probes drawn uniformly from other speakers' non-support files.
pub fn build_trials(
    eval_manifest: &DatasetManifest,
    per_speaker_probes: usize,
    impostor_ratio: f64,
    rng: &mut ChaCha8Rng,
    support_paths: &BTreeSet<PathBuf>,
) -> Result<Vec<TrialPair>> {
    if per_speaker_probes == 0 {
        return Err(Error::Config("need at least one probe per speaker".into()));
    }
    if !(impostor_ratio.is_finite() && impostor_ratio >= 0.0) {
        return Err(Error::Config(format!(
            "impostor ratio must be non-negative, got {impostor_ratio}"
        )));
    }
    let speakers = eval_manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::Contract(
            "impostor trials need at least 2 evaluation speakers".into(),
        ));
    }
    // Per-speaker probe pools: every file not used for enrollment.
    let mut pools: BTreeMap<&str, Vec<&Path>> = BTreeMap::new();
    for s in &speakers {
        let pool: Vec<&Path> = eval_manifest
            .entries_for(s)
            .into_iter()
            .filter(|e| !support_paths.contains(&e.wav_path))
            .map(|e| e.wav_path.as_path())
            .collect();
        if pool.is_empty() {
            return Err(Error::InsufficientData {
                speaker: s.clone(),
                detail: "no probe files left outside the support set".into(),
            });
        }
        pools.insert(s.as_str(), pool);
    }

    let n_impostor = (impostor_ratio * per_speaker_probes as f64).round() as usize;
    let mut trials = Vec::new();
    for s in &speakers {
        let mut own: Vec<&Path> = pools[s.as_str()].clone();
        own.shuffle(rng);
        for i in 0..per_speaker_probes {
            trials.push(TrialPair {
                enroll_speaker: s.clone(),
                probe_path: own[i % own.len()].to_path_buf(),
                label: Label::Genuine,
            });
        }
        let others: Vec<&Path> = speakers
            .iter()
            .filter(|o| o != &s)
            .flat_map(|o| pools[o.as_str()].iter().copied())
            .collect();
        for _ in 0..n_impostor {
            let pick = others[rng.random_range(0..others.len())];
            trials.push(TrialPair {
                enroll_speaker: s.clone(),
                probe_path: pick.to_path_buf(),
                label: Label::Impostor,
            });
        }
    }
    Ok(trials)
}

/// Writes `label enroll_speaker probe_path` lines, label 1 = genuine.
pub fn write_trials(path: &Path, trials: &[TrialPair]) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!(
            "{} {} {}\n",
            t.label,
            t.enroll_speaker,
            t.probe_path.display()
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a trial list. The probe path is everything after the second
/// separator, so paths containing spaces survive.
pub fn read_trials(path: &Path) -> Result<Vec<TrialPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ' ');
        let (label, speaker, probe) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(s), Some(p)) if !s.is_empty() && !p.is_empty() => (l, s, p),
            _ => {
                return Err(Error::Format(format!(
                    "line {}: expected `label enroll_speaker probe_path`",
                    i + 1
                )))
            }
        };
        trials.push(TrialPair {
            enroll_speaker: speaker.to_string(),
            probe_path: PathBuf::from(probe),
            label: Label::from_digit(label)?,
        });
    }
    Ok(trials)
}

/// Enrolls a speaker: the unit-normalized centroid of the support clips'
/// embeddings.
pub fn enroll(net: &EmbeddingNet, support: &SupportSet, framing: &Framing) -> Result<Tensor> {
    let e = net.config.embedding_dim;
    // A single clip enrolls as its embedding, bit for bit: the mean of one
    // vector is itself and it is already unit, so skipping the arithmetic
    // keeps "probe == the enrollment clip" scoring exactly 0.
    if let [clip] = support.clips.as_slice() {
        return net.embed(&framing.volume(clip)?, Mode::Eval);
    }
    let mut centroid = vec![0.0; e];
    for clip in &support.clips {
        let emb = net.embed(&framing.volume(clip)?, Mode::Eval)?;
        for (c, &v) in centroid.iter_mut().zip(emb.data()) {
            *c += v;
        }
    }
    let k = support.clips.len() as f64;
    for c in &mut centroid {
        *c /= k;
    }
    let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Numeric(format!(
            "support centroid of {} has norm {norm}",
            support.speaker_id
        )));
    }
    for c in &mut centroid {
        *c /= norm;
    }
    Tensor::new(vec![e], centroid)
}

/// Scores a probe against an enrolled model: the negated Euclidean
/// distance between unit embeddings, in `[-2, 0]`, higher meaning more
/// likely genuine.
pub fn verify(net: &EmbeddingNet, enrolled: &Tensor, probe: &Volume) -> Result<f64> {
    if enrolled.shape() != [net.config.embedding_dim] {
        return Err(Error::Dimension(format!(
            "enrolled model of shape {:?} against embedding width {}",
            enrolled.shape(),
            net.config.embedding_dim
        )));
    }
    if (enrolled.l2_norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "enrolled model norm {} is not 1",
            enrolled.l2_norm()
        )));
    }
    let emb = net.embed(probe, Mode::Eval)?;
    // Subtracting from 0.0 instead of negating keeps a zero distance at
    // +0, so an exact self-match never prints as -0.
    Ok(0.0 - embedding_distance(enrolled, &emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_wav;
    use crate::network::NetConfig;
    use crate::seeding::sub_rng;
    use std::f64::consts::TAU;

    /// 0.1 s tone corpus: `speakers x utterances` files under `dir`.
    fn make_corpus(dir: &Path, speakers: usize, utterances: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for s in 0..speakers {
            for u in 0..utterances {
                let freq = 200.0 + 60.0 * s as f64 + 3.0 * u as f64;
                let samples: Vec<f64> = (0..1600)
                    .map(|i| 0.6 * (TAU * freq * i as f64 / 16_000.0).sin())
                    .collect();
                let clip = WavClip::new(SAMPLE_RATE, samples).unwrap();
                let path = dir.join(format!("s{s:02}_u{u:02}.wav"));
                std::fs::write(&path, write_wav(&clip)).unwrap();
                entries.push(ManifestEntry {
                    speaker_id: format!("s{s:02}"),
                    wav_path: path,
                    duration_s: 0.1,
                });
            }
        }
        DatasetManifest::new(entries).unwrap()
    }

    /// Support duration matching the reduced test network input.
    const TEST_DURATION: f64 = 0.064; // 1024 samples
    fn test_framing() -> Framing {
        Framing {
            window: 64,
            hop: 64,
            patch_rows: 8,
        }
    }
    fn test_net() -> EmbeddingNet {
        EmbeddingNet::init_seeded(NetConfig::reduced([16, 8, 8, 1], [3, 4, 5], 6), 31).unwrap()
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_rows() {
        let entry = |p: &str, d: f64| ManifestEntry {
            speaker_id: "a".into(),
            wav_path: PathBuf::from(p),
            duration_s: d,
        };
        assert!(DatasetManifest::new(vec![]).is_err());
        assert!(DatasetManifest::new(vec![entry("x.wav", 1.0), entry("x.wav", 1.0)]).is_err());
        assert!(DatasetManifest::new(vec![entry("x.wav", 0.0)]).is_err());
        let mut bad = entry("x.wav", 1.0);
        bad.speaker_id = "a b".into();
        assert!(DatasetManifest::new(vec![bad]).is_err());
    }

    #[test]
    fn manifest_roundtrips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 2);
        let path = dir.path().join("manifest.csv");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn relative_manifest_paths_resolve_against_its_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("manifest.csv"),
            "speaker_id,wav_path,duration_s\na,clips/x.wav,1.5\n",
        )
        .unwrap();
        let m = DatasetManifest::read(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m.entries()[0].wav_path, dir.path().join("clips/x.wav"));
    }

    #[test]
    fn ten_speakers_split_seven_three() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 10, 2);
        let mut rng = sub_rng(5, "split");
        let (train, eval) = split_dataset(&m, 0.7, &mut rng).unwrap();
        assert_eq!(train.speakers().len(), 7);
        assert_eq!(eval.speakers().len(), 3);
    }

    #[test]
    fn split_sides_share_no_speaker() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 9, 2);
        let mut rng = sub_rng(6, "split");
        let (train, eval) = split_dataset(&m, 0.7, &mut rng).unwrap();
        let train_set: BTreeSet<String> = train.speakers().into_iter().collect();
        assert!(eval.speakers().iter().all(|s| !train_set.contains(s)));
        assert_eq!(train.len() + eval.len(), m.len());
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 8, 2);
        let (t1, e1) = split_dataset(&m, 0.7, &mut sub_rng(7, "split")).unwrap();
        let (t2, e2) = split_dataset(&m, 0.7, &mut sub_rng(7, "split")).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(e1, e2);
        let (t3, _) = split_dataset(&m, 0.7, &mut sub_rng(8, "split")).unwrap();
        assert_ne!(t1.speakers(), t3.speakers());
    }

    #[test]
    fn split_needs_two_speakers() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 3);
        assert!(matches!(
            split_dataset(&m, 0.7, &mut sub_rng(1, "split")),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn support_uses_all_utterances_when_exactly_k() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 5);
        let mut rng = sub_rng(9, "support:s00");
        let set = sample_support(&m, "s00", 5, TEST_DURATION, &mut rng).unwrap();
        assert_eq!(set.k(), 5);
        let expected: BTreeSet<PathBuf> =
            m.entries_for("s00").iter().map(|e| e.wav_path.clone()).collect();
        let got: BTreeSet<PathBuf> = set.sources.iter().cloned().collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn support_with_too_few_utterances_names_the_speaker() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 4);
        let err = sample_support(&m, "s01", 5, TEST_DURATION, &mut sub_rng(1, "s"))
            .unwrap_err();
        match err {
            Error::InsufficientData { speaker, .. } => assert_eq!(speaker, "s01"),
            other => panic!("expected insufficient data, got {other:?}"),
        }
    }

    #[test]
    fn support_sampling_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 20);
        let a = sample_support(&m, "s00", 5, TEST_DURATION, &mut sub_rng(3, "support:s00"))
            .unwrap();
        let b = sample_support(&m, "s00", 5, TEST_DURATION, &mut sub_rng(3, "support:s00"))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn support_clips_have_exact_length() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 6);
        let set = sample_support(&m, "s00", 5, TEST_DURATION, &mut sub_rng(4, "s")).unwrap();
        assert!(set.clips.iter().all(|c| c.len() == 1024));
    }

    #[test]
    fn trials_count_genuine_and_impostor_sides() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 3, 6);
        let trials = build_trials(&m, 10, 1.0, &mut sub_rng(5, "trials"), &BTreeSet::new())
            .unwrap();
        assert_eq!(trials.len(), 60);
        let genuine = trials.iter().filter(|t| t.label == Label::Genuine).count();
        assert_eq!(genuine, 30);
    }

    #[test]
    fn impostor_probes_come_from_other_speakers() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 4, 5);
        let by_path: BTreeMap<PathBuf, String> = m
            .entries()
            .iter()
            .map(|e| (e.wav_path.clone(), e.speaker_id.clone()))
            .collect();
        let trials =
            build_trials(&m, 8, 1.0, &mut sub_rng(6, "trials"), &BTreeSet::new()).unwrap();
        for t in &trials {
            let probe_speaker = &by_path[&t.probe_path];
            match t.label {
                Label::Genuine => assert_eq!(probe_speaker, &t.enroll_speaker),
                Label::Impostor => assert_ne!(probe_speaker, &t.enroll_speaker),
            }
        }
    }

    #[test]
    fn trials_are_deterministic_and_respect_support_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 3, 6);
        let support: BTreeSet<PathBuf> = m
            .entries()
            .iter()
            .filter(|e| e.wav_path.to_string_lossy().contains("u00"))
            .map(|e| e.wav_path.clone())
            .collect();
        let a = build_trials(&m, 10, 1.0, &mut sub_rng(7, "trials"), &support).unwrap();
        let b = build_trials(&m, 10, 1.0, &mut sub_rng(7, "trials"), &support).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|t| !support.contains(&t.probe_path)));
    }

    #[test]
    fn single_eval_speaker_cannot_build_impostors() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 6);
        assert!(matches!(
            build_trials(&m, 5, 1.0, &mut sub_rng(8, "trials"), &BTreeSet::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn trial_file_roundtrips_with_spaced_paths() {
        let dir = tempfile::tempdir().unwrap();
        let trials = vec![
            TrialPair {
                enroll_speaker: "s00".into(),
                probe_path: PathBuf::from("/tmp/with space/x.wav"),
                label: Label::Genuine,
            },
            TrialPair {
                enroll_speaker: "s01".into(),
                probe_path: PathBuf::from("plain.wav"),
                label: Label::Impostor,
            },
        ];
        let path = dir.path().join("trials.txt");
        write_trials(&path, &trials).unwrap();
        assert_eq!(read_trials(&path).unwrap(), trials);
    }

    #[test]
    fn enrolling_identical_clips_reproduces_the_single_embedding() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 1);
        let clip = load_wav(&m.entries()[0].wav_path).unwrap();
        let cut = extract_clip(&clip, TEST_DURATION, &mut sub_rng(1, "c")).unwrap();
        let net = test_net();
        let framing = test_framing();
        let single = net.embed(&framing.volume(&cut).unwrap(), Mode::Eval).unwrap();
        let support = SupportSet::new(
            "s00".into(),
            vec![cut.clone(), cut.clone(), cut.clone(), cut],
            vec![PathBuf::from("a"), "b".into(), "c".into(), "d".into()],
        )
        .unwrap();
        let model = enroll(&net, &support, &framing).unwrap();
        for (a, b) in model.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn enrolled_model_is_unit_norm_and_matches_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 6);
        let net = test_net();
        let framing = test_framing();
        let support =
            sample_support(&m, "s00", 5, TEST_DURATION, &mut sub_rng(2, "support:s00"))
                .unwrap();
        let model = enroll(&net, &support, &framing).unwrap();
        assert!((model.l2_norm() - 1.0).abs() < 1e-9);

        // Brute-force mean-then-normalize oracle.
        let mut mean = vec![0.0; 6];
        for clip in &support.clips {
            let e = net.embed(&framing.volume(clip).unwrap(), Mode::Eval).unwrap();
            for (m, &v) in mean.iter_mut().zip(e.data()) {
                *m += v;
            }
        }
        for v in &mut mean {
            *v /= support.k() as f64;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (got, want) in model.data().iter().zip(mean.iter().map(|v| v / norm)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn verify_scores_self_probe_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 1);
        let net = test_net();
        let framing = test_framing();
        let clip = load_wav(&m.entries()[0].wav_path).unwrap();
        let cut = extract_clip(&clip, TEST_DURATION, &mut sub_rng(3, "c")).unwrap();
        let volume = framing.volume(&cut).unwrap();
        let enrolled = net.embed(&volume, Mode::Eval).unwrap();
        let score = verify(&net, &enrolled, &volume).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn verify_score_is_symmetric_in_the_two_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 2, 1);
        let net = test_net();
        let framing = test_framing();
        let mut volumes = Vec::new();
        for e in m.entries() {
            let clip = load_wav(&e.wav_path).unwrap();
            let cut = extract_clip(&clip, TEST_DURATION, &mut sub_rng(4, "c")).unwrap();
            volumes.push(framing.volume(&cut).unwrap());
        }
        let ea = net.embed(&volumes[0], Mode::Eval).unwrap();
        let eb = net.embed(&volumes[1], Mode::Eval).unwrap();
        let ab = verify(&net, &ea, &volumes[1]).unwrap();
        let ba = verify(&net, &eb, &volumes[0]).unwrap();
        assert_eq!(ab, ba);
        assert!((-2.0..=0.0).contains(&ab));
    }

    #[test]
    fn verify_rejects_unnormalized_models() {
        let net = test_net();
        let bad = Tensor::full(vec![6], 0.5);
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(dir.path(), 1, 1);
        let clip = load_wav(&m.entries()[0].wav_path).unwrap();
        let cut = extract_clip(&clip, TEST_DURATION, &mut sub_rng(5, "c")).unwrap();
        let volume = test_framing().volume(&cut).unwrap();
        assert!(matches!(
            verify(&net, &bad, &volume),
            Err(Error::Contract(_))
        ));
    }
}
