//! The three training-loss components and their weighted combination.
//!
//! The composite objective is `total = l_ce + lambda * l_c + l_bs`:
//! categorical cross-entropy over the speaker classifier, a center loss
//! pulling embeddings toward their per-speaker centers, and a
//! speaker-bias loss pushing the classifier's per-speaker basis vectors
//! apart. The center bank lives outside the tape and is updated by an
//! explicit rule after each step, never by backpropagation.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Default center-loss weight in the composite objective.
pub const LAMBDA: f64 = 0.003;

/// Default center update rate.
pub const CENTER_UPDATE_RATE: f64 = 0.5;

/// One embedding-space center per training speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    centers: Tensor,
    update_rate: f64,
}

impl CenterBank {
    /// Zero-initialized centers; they move toward class means as updates
    /// arrive.
    pub fn new(num_speakers: usize, embedding_dim: usize, update_rate: f64) -> Result<Self> {
        if num_speakers == 0 || embedding_dim == 0 {
            return Err(Error::Config(
                "center bank needs speakers and a positive embedding width".into(),
            ));
        }
        if !(update_rate > 0.0 && update_rate <= 1.0) {
            return Err(Error::Config(format!(
                "center update rate must lie in (0, 1], got {update_rate}"
            )));
        }
        Ok(CenterBank {
            centers: Tensor::zeros(vec![num_speakers, embedding_dim]),
            update_rate,
        })
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn num_speakers(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn update_rate(&self) -> f64 {
        self.update_rate
    }

    /// Restores a bank from checkpointed centers.
    pub fn from_centers(centers: Tensor, update_rate: f64) -> Result<Self> {
        if centers.rank() != 2 {
            return Err(Error::Dimension(format!(
                "centers want rank 2, got {:?}",
                centers.shape()
            )));
        }
        if !centers.all_finite() {
            return Err(Error::Numeric("centers hold non-finite values".into()));
        }
        if !(update_rate > 0.0 && update_rate <= 1.0) {
            return Err(Error::Config(format!(
                "center update rate must lie in (0, 1], got {update_rate}"
            )));
        }
        Ok(CenterBank {
            centers,
            update_rate,
        })
    }
}

/// Moves each center present in the batch toward the mean of its batch
/// members: `c_y <- c_y - alpha * mean(c_y - x_i)`. Absent classes keep
/// their centers.
pub fn update_centers(bank: &mut CenterBank, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
    let (s, e) = (bank.num_speakers(), bank.embedding_dim());
    if embeddings.rank() != 2 || embeddings.shape()[1] != e {
        return Err(Error::Dimension(format!(
            "embeddings of shape {:?} against {e}-wide centers",
            embeddings.shape()
        )));
    }
    let n = embeddings.shape()[0];
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} embedding rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
        return Err(Error::Index(format!("no center for label {bad} ({s} centers)")));
    }
    let mut sums = vec![0.0; s * e];
    let mut counts = vec![0usize; s];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        let row = &embeddings.data()[i * e..(i + 1) * e];
        for (acc, &v) in sums[y * e..(y + 1) * e].iter_mut().zip(row) {
            *acc += v;
        }
    }
    let alpha = bank.update_rate;
    let centers = bank.centers.data_mut();
    for y in 0..s {
        if counts[y] == 0 {
            continue;
        }
        let inv = 1.0 / counts[y] as f64;
        for k in 0..e {
            let mean_residual = centers[y * e + k] - sums[y * e + k] * inv;
            centers[y * e + k] -= alpha * mean_residual;
        }
    }
    Ok(())
}

/// Mean negative log-softmax of the true class, in log-sum-exp form.
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    tape.cross_entropy(logits, labels)
}

/// `(1/2N) * sum_i ||x_i - c_{y_i}||^2` with centers held constant.
pub fn center_loss(
    tape: &mut Tape,
    embeddings: TensorId,
    labels: &[usize],
    bank: &CenterBank,
) -> Result<TensorId> {
    tape.center_loss(embeddings, labels, bank.centers())
}

/// `(2/(S(S-1))) * sum_{i<j} max(0, cos(w_i, w_j))^2` over the classifier
/// basis rows.
pub fn speaker_bias_loss(tape: &mut Tape, weight: TensorId) -> Result<TensorId> {
    tape.speaker_bias_loss(weight)
}

/// The composite loss and its components for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_c: f64,
    pub l_bs: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Combines the components. This is the only place the total is computed,
/// so `total == l_ce + lambda*l_c + l_bs` holds bit-for-bit everywhere a
/// breakdown appears.
pub fn combined_loss(l_ce: f64, l_c: f64, l_bs: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [("l_ce", l_ce), ("l_c", l_c), ("l_bs", l_bs), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    let total = (l_ce + lambda * l_c) + l_bs;
    Ok(LossBreakdown {
        l_ce,
        l_c,
        l_bs,
        lambda,
        total,
    })
}

/// Builds the composite loss node `(ce + lambda*c) + bs` on the tape and
/// the matching [`LossBreakdown`]. The tape node and `breakdown.total`
/// agree bitwise because both evaluate the same expression tree.
pub fn combined_loss_node(
    tape: &mut Tape,
    l_ce: TensorId,
    l_c: TensorId,
    l_bs: TensorId,
    lambda: f64,
) -> Result<(TensorId, LossBreakdown)> {
    let breakdown = combined_loss(
        tape.value(l_ce)?,
        tape.value(l_c)?,
        tape.value(l_bs)?,
        lambda,
    )?;
    let weighted_c = tape.scale(l_c, lambda);
    let ce_c = tape.add(l_ce, weighted_c)?;
    let total = tape.add(ce_c, l_bs)?;
    debug_assert_eq!(tape.value(total)?, breakdown.total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    // ---- cross-entropy ---------------------------------------------------

    #[test]
    fn uniform_logits_cost_ln_s() {
        let logits = Tensor::zeros(vec![2, 4]);
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = cross_entropy(&mut tape, l, &[0, 3]).unwrap();
        assert!((tape.value(loss).unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_costs_nothing() {
        let logits = Tensor::new(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = cross_entropy(&mut tape, l, &[1]).unwrap();
        assert!(tape.value(loss).unwrap() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_tensor(&mut rng, vec![8, 5]);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
        let mut oracle = 0.0;
        for i in 0..8 {
            let row = &logits.data()[i * 5..(i + 1) * 5];
            let denom: f64 = row.iter().map(|&z| z.exp()).sum();
            oracle += -(row[labels[i]].exp() / denom).ln();
        }
        oracle /= 8.0;
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = cross_entropy(&mut tape, l, &labels).unwrap();
        assert!((tape.value(loss).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_an_index_error() {
        let logits = Tensor::zeros(vec![2, 3]);
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        assert!(matches!(
            cross_entropy(&mut tape, l, &[0, 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_tensor(&mut rng, vec![4, 5]);
        let err = grad_check(
            |tape, ids| cross_entropy(tape, ids[0], &[1, 4, 0, 2]),
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    // ---- center loss -------------------------------------------------------

    #[test]
    fn embeddings_on_their_centers_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = random_tensor(&mut rng, vec![3, 4]);
        let bank = CenterBank::from_centers(centers.clone(), 0.5).unwrap();
        let labels = [2usize, 0, 1];
        let mut rows = Vec::new();
        for &y in &labels {
            rows.extend_from_slice(&centers.data()[y * 4..(y + 1) * 4]);
        }
        let emb = Tensor::new(vec![3, 4], rows).unwrap();
        let mut tape = Tape::new();
        let e = tape.leaf(&emb);
        let loss = center_loss(&mut tape, e, &labels, &bank).unwrap();
        assert_eq!(tape.value(loss).unwrap(), 0.0);
    }

    #[test]
    fn single_three_four_residual_costs_twelve_and_a_half() {
        let bank = CenterBank::new(1, 2, 0.5).unwrap();
        let emb = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let e = tape.leaf(&emb);
        let loss = center_loss(&mut tape, e, &[0], &bank).unwrap();
        assert_eq!(tape.value(loss).unwrap(), 12.5);
    }

    #[test]
    fn center_loss_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let centers = random_tensor(&mut rng, vec![4, 6]);
        let bank = CenterBank::from_centers(centers.clone(), 0.5).unwrap();
        let emb = random_tensor(&mut rng, vec![7, 6]);
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..4)).collect();
        let mut oracle = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for k in 0..6 {
                let r = emb.data()[i * 6 + k] - centers.data()[y * 6 + k];
                oracle += r * r;
            }
        }
        oracle /= 14.0;
        let mut tape = Tape::new();
        let e = tape.leaf(&emb);
        let loss = center_loss(&mut tape, e, &labels, &bank).unwrap();
        assert!((tape.value(loss).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn missing_center_is_an_index_error() {
        let bank = CenterBank::new(2, 3, 0.5).unwrap();
        let emb = Tensor::zeros(vec![1, 3]);
        let mut tape = Tape::new();
        let e = tape.leaf(&emb);
        assert!(matches!(
            center_loss(&mut tape, e, &[2], &bank),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn center_loss_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers = random_tensor(&mut rng, vec![3, 4]);
        let bank = CenterBank::from_centers(centers, 0.5).unwrap();
        let emb = random_tensor(&mut rng, vec![5, 4]);
        let labels = [0usize, 2, 1, 0, 2];
        let err = grad_check(
            move |tape, ids| center_loss(tape, ids[0], &labels, &bank),
            &[emb],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    // ---- center updates -----------------------------------------------------

    #[test]
    fn absent_class_keeps_its_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let centers = random_tensor(&mut rng, vec![3, 2]);
        let mut bank = CenterBank::from_centers(centers.clone(), 0.5).unwrap();
        let emb = random_tensor(&mut rng, vec![2, 2]);
        update_centers(&mut bank, &emb, &[0, 0]).unwrap();
        assert_eq!(
            &bank.centers().data()[2..6],
            &centers.data()[2..6],
            "classes 1 and 2 were absent"
        );
        assert_ne!(&bank.centers().data()[0..2], &centers.data()[0..2]);
    }

    #[test]
    fn full_rate_single_member_moves_center_onto_it() {
        let mut bank = CenterBank::new(2, 2, 1.0).unwrap();
        let emb = Tensor::new(vec![1, 2], vec![0.25, -0.75]).unwrap();
        update_centers(&mut bank, &emb, &[1]).unwrap();
        assert_eq!(&bank.centers().data()[2..4], emb.data());
    }

    #[test]
    fn repeated_updates_converge_to_the_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = CenterBank::new(2, 3, 0.5).unwrap();
        let emb = random_tensor(&mut rng, vec![6, 3]);
        let labels = [0usize, 1, 0, 1, 0, 1];
        for _ in 0..50 {
            update_centers(&mut bank, &emb, &labels).unwrap();
        }
        for y in 0..2 {
            let members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == y)
                .map(|(i, _)| i)
                .collect();
            for k in 0..3 {
                let mean = members
                    .iter()
                    .map(|&i| emb.data()[i * 3 + k])
                    .sum::<f64>()
                    / members.len() as f64;
                assert!((bank.centers().data()[y * 3 + k] - mean).abs() < 1e-6);
            }
        }
    }

    // ---- speaker-bias loss ----------------------------------------------------

    #[test]
    fn orthogonal_basis_costs_nothing() {
        let w = Tensor::new(
            vec![3, 3],
            vec![2.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, -1.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        let loss = speaker_bias_loss(&mut tape, wid).unwrap();
        assert_eq!(tape.value(loss).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_cost_one() {
        let w = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        let loss = speaker_bias_loss(&mut tape, wid).unwrap();
        assert!((tape.value(loss).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn speaker_bias_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random_tensor(&mut rng, vec![6, 8]);
        let mut oracle = 0.0;
        for i in 0..6 {
            for j in (i + 1)..6 {
                let a = &w.data()[i * 8..(i + 1) * 8];
                let b = &w.data()[j * 8..(j + 1) * 8];
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>() / (na * nb);
                oracle += cos.max(0.0).powi(2);
            }
        }
        oracle *= 2.0 / (6.0 * 5.0);
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        let loss = speaker_bias_loss(&mut tape, wid).unwrap();
        assert!((tape.value(loss).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_row_is_a_degenerate_basis() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        assert!(matches!(
            speaker_bias_loss(&mut tape, wid),
            Err(Error::DegenerateBasis(_))
        ));
    }

    #[test]
    fn single_row_basis_is_a_contract_error() {
        let w = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let wid = tape.leaf(&w);
        assert!(matches!(
            speaker_bias_loss(&mut tape, wid),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn speaker_bias_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_tensor(&mut rng, vec![4, 5]);
        let err = grad_check(
            |tape, ids| speaker_bias_loss(tape, ids[0]),
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    // ---- combination -----------------------------------------------------------

    #[test]
    fn breakdown_total_is_the_exact_weighted_sum() {
        let b = combined_loss(1.25, 3.5, 0.125, 0.003).unwrap();
        assert_eq!(b.total, (1.25 + 0.003 * 3.5) + 0.125);
        assert_eq!(b.lambda, 0.003);
    }

    #[test]
    fn non_finite_component_is_a_numeric_error() {
        assert!(matches!(
            combined_loss(f64::NAN, 0.0, 0.0, LAMBDA),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            combined_loss(0.0, f64::INFINITY, 0.0, LAMBDA),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn tape_total_matches_breakdown_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = random_tensor(&mut rng, vec![4, 3]);
        let emb = random_tensor(&mut rng, vec![4, 5]);
        let w = random_tensor(&mut rng, vec![3, 5]);
        let centers = random_tensor(&mut rng, vec![3, 5]);
        let bank = CenterBank::from_centers(centers, 0.5).unwrap();
        let labels = [0usize, 2, 1, 0];

        let mut tape = Tape::new();
        let lid = tape.leaf(&logits);
        let eid = tape.leaf(&emb);
        let wid = tape.leaf(&w);
        let ce = cross_entropy(&mut tape, lid, &labels).unwrap();
        let lc = center_loss(&mut tape, eid, &labels, &bank).unwrap();
        let bs = speaker_bias_loss(&mut tape, wid).unwrap();
        let (total, breakdown) = combined_loss_node(&mut tape, ce, lc, bs, LAMBDA).unwrap();
        assert_eq!(tape.value(total).unwrap(), breakdown.total);
        assert_eq!(
            breakdown.total,
            (breakdown.l_ce + breakdown.lambda * breakdown.l_c) + breakdown.l_bs
        );
    }

    #[test]
    fn composite_loss_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits = random_tensor(&mut rng, vec![3, 4]);
        let emb = random_tensor(&mut rng, vec![3, 5]);
        let w = random_tensor(&mut rng, vec![4, 5]);
        let centers = random_tensor(&mut rng, vec![4, 5]);
        let bank = CenterBank::from_centers(centers, 0.5).unwrap();
        let labels = [1usize, 3, 0];
        let err = grad_check(
            move |tape, ids| {
                let ce = cross_entropy(tape, ids[0], &labels)?;
                let lc = center_loss(tape, ids[1], &labels, &bank)?;
                let bs = speaker_bias_loss(tape, ids[2])?;
                let (total, _) = combined_loss_node(tape, ce, lc, bs, LAMBDA)?;
                Ok(total)
            },
            &[logits, emb, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
