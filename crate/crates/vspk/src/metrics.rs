//! Verification metrics: equal error rate, DET curve points, accuracy.
//!
//! The threshold convention is accept-at-threshold: `FAR(t)` is the
//! fraction of impostor scores `>= t`, `FRR(t)` the fraction of genuine
//! scores `< t`. Sweeping `t` over every distinct score ascending, plus a
//! `+inf` sentinel, walks the DET curve from `(FAR, FRR) = (1, 0)` to
//! `(0, 1)`; the equal error rate sits where the two rates cross, linearly
//! interpolated between adjacent operating points when no sweep point hits
//! the crossing exactly.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Trial outcome label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Genuine,
    Impostor,
}

impl Label {
    /// File encoding: 1 = genuine, 0 = impostor.
    pub fn as_digit(self) -> u8 {
        match self {
            Label::Genuine => 1,
            Label::Impostor => 0,
        }
    }

    pub fn from_digit(d: &str) -> Result<Self> {
        match d {
            "1" => Ok(Label::Genuine),
            "0" => Ok(Label::Impostor),
            other => Err(Error::Format(format!("label must be 1 or 0, got {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_digit())
    }
}

/// Labeled verification scores for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    entries: Vec<(f64, Label)>,
}

/// One DET operating point: accept-threshold, false-accept rate, false-
/// reject rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

impl ScoreSet {
    pub fn new(entries: Vec<(f64, Label)>) -> Result<Self> {
        if let Some((bad, _)) = entries.iter().find(|(s, _)| !s.is_finite()) {
            return Err(Error::Numeric(format!("score {bad} is not finite")));
        }
        Ok(ScoreSet { entries })
    }

    pub fn push(&mut self, score: f64, label: Label) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::Numeric(format!("score {score} is not finite")));
        }
        self.entries.push((score, label));
        Ok(())
    }

    pub fn entries(&self) -> &[(f64, Label)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn split_sorted(&self) -> (Vec<f64>, Vec<f64>) {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for &(s, l) in &self.entries {
            match l {
                Label::Genuine => genuine.push(s),
                Label::Impostor => impostor.push(s),
            }
        }
        genuine.sort_by(f64::total_cmp);
        impostor.sort_by(f64::total_cmp);
        (genuine, impostor)
    }

    fn require_both_classes(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (genuine, impostor) = self.split_sorted();
        if genuine.is_empty() || impostor.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "need both classes, got {} genuine and {} impostor scores",
                genuine.len(),
                impostor.len()
            )));
        }
        Ok((genuine, impostor))
    }
}

/// Count of sorted values `>= t` (via partition point).
fn count_at_or_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

/// Count of sorted values `< t`.
fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v < t)
}

/// DET operating points at every distinct score ascending, then a `+inf`
/// sentinel. The first point is always `(1, 0)`, the last `(0, 1)`; FAR is
/// non-increasing and FRR non-decreasing along the list.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (genuine, impostor) = scores.require_both_classes()?;
    let mut thresholds: Vec<f64> = scores.entries.iter().map(|&(s, _)| s).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let n_gen = genuine.len() as f64;
    let n_imp = impostor.len() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            far: count_at_or_above(&impostor, t) as f64 / n_imp,
            frr: count_below(&genuine, t) as f64 / n_gen,
        })
        .collect())
}

/// Equal error rate and its accept-threshold.
///
/// Walks the DET points for the first place `FAR - FRR` touches or crosses
/// zero. An exact touch reports that point; otherwise the rate is linearly
/// interpolated inside the bracketing segment. When the crossing falls in
/// the final segment toward the sentinel, the last finite threshold is
/// reported.
pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let points = det_points(scores)?;
    for k in 0..points.len() {
        let d = points[k].far - points[k].frr;
        if d == 0.0 {
            return Ok((points[k].far, points[k].threshold));
        }
        if d > 0.0 && k + 1 < points.len() {
            let d_next = points[k + 1].far - points[k + 1].frr;
            if d_next < 0.0 {
                let t = d / (d - d_next);
                let eer = points[k].frr + t * (points[k + 1].frr - points[k].frr);
                let threshold = if points[k + 1].threshold.is_finite() {
                    points[k].threshold
                        + t * (points[k + 1].threshold - points[k].threshold)
                } else {
                    points[k].threshold
                };
                return Ok((eer, threshold));
            }
        }
    }
    unreachable!("FAR - FRR runs from 1 to -1, so a sign change always exists")
}

/// Fraction of positions where prediction equals label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Contract("accuracy of zero samples".into()));
    }
    let matches = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(matches as f64 / predictions.len() as f64)
}

/// Writes `score<TAB>label` lines, label 1 = genuine.
pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    let mut out = String::new();
    for &(s, l) in scores.entries() {
        out.push_str(&format!("{s}\t{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a `score<TAB>label` file.
pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (score, label) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("line {}: expected score<TAB>label", i + 1))
        })?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad score {score:?}", i + 1)))?;
        entries.push((score, Label::from_digit(label)?));
    }
    ScoreSet::new(entries)
}

/// Writes DET points as CSV with a `threshold,far,frr` header.
pub fn write_det(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
