//! Supervised and neighbourhood losses, on the tape and as plain values.

use crate::config::DivSign;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Allowed deviation of a probability vector's sum from one.
pub const PROB_TOLERANCE: f64 = 1e-6;

/// Smoothed one-hot targets: `1 - eps + eps/K` on the label, `eps/K` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    let mut t = Tensor::full(&[labels.len(), classes], eps / classes as f64);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside [0, {classes})")));
        }
        t.row_mut(i)[l] += 1.0 - eps;
    }
    Ok(t)
}

/// Batch-mean cross-entropy of `logits` `[B, K]` against smoothed targets.
pub fn smoothed_cross_entropy_on(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let targets = tape.constant(smoothed_targets(labels, shape[1], eps)?);
    let logp = tape.log_softmax(logits, 1)?;
    let weighted = tape.mul(targets, logp)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

pub fn smoothed_cross_entropy(logits: &Tensor, labels: &[usize], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = smoothed_cross_entropy_on(&mut tape, l, labels, eps)?;
    Ok(tape.value(out).item())
}

fn check_probabilities(t: &Tensor, what: &str) -> Result<()> {
    let cols = *t.shape().last().unwrap_or(&1);
    for row in t.data().chunks(cols) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE || row.iter().any(|&p| p < -PROB_TOLERANCE) {
            return Err(Error::Contract(format!(
                "{what} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// `KL(p || q) = sum_k p_k (ln p_k - ln q_k)` with both sides floored at
/// [`PROB_FLOOR`]. `pred` and `target` share a shape; rows are independent
/// and the result is their sum.
pub fn kl_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let lp = tape.clamp_min(pred, PROB_FLOOR);
    let lp = tape.log(lp);
    let lq = tape.clamp_min(target, PROB_FLOOR);
    let lq = tape.log(lq);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(pred, diff)?;
    Ok(tape.sum(terms))
}

/// Similarity loss of one prediction `[K]` against the mean of its
/// neighbours' predictions `[M, K]`.
pub fn similarity_loss_on(tape: &mut Tape, pred: Var, neighbor_preds: Var) -> Result<Var> {
    let m = tape.value(neighbor_preds).shape()[0];
    let summed = tape.sum_axis(neighbor_preds, 0)?;
    let mean = tape.scale(summed, 1.0 / m as f64);
    kl_on(tape, pred, mean)
}

/// Value form of [`similarity_loss_on`], validating both inputs.
pub fn similarity_loss(pred: &Tensor, neighbor_preds: &Tensor) -> Result<f64> {
    check_probabilities(pred, "prediction")?;
    check_probabilities(neighbor_preds, "neighbour prediction")?;
    if neighbor_preds.shape().len() != 2 || neighbor_preds.shape()[1] != pred.numel() {
        return Err(Error::Dimension(format!(
            "neighbour predictions {:?} do not match a {}-class prediction",
            neighbor_preds.shape(),
            pred.numel()
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let n = tape.constant(neighbor_preds.clone());
    let out = similarity_loss_on(&mut tape, p, n)?;
    Ok(tape.value(out).item())
}

fn sign_factor(sign: DivSign) -> f64 {
    match sign {
        DivSign::Negated => -1.0,
        DivSign::Literal => 1.0,
    }
}

/// Dispersion of one prediction `[K]` from the other batch predictions
/// `[P, K]`: `∓ (1/P) Σ_p ||pred - other_p||²`. Returns a zero constant
/// when `P = 0`.
pub fn diversity_loss_on(tape: &mut Tape, pred: Var, others: Var, sign: DivSign) -> Result<Var> {
    let p = tape.value(others).shape()[0];
    let spread = tape.broadcast_rows(pred, p)?;
    let diff = tape.sub(spread, others)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, sign_factor(sign) / p as f64))
}

/// Value form of [`diversity_loss_on`] with the default (negated) sign.
pub fn diversity_loss(pred: &Tensor, others: &Tensor) -> Result<f64> {
    diversity_loss_signed(pred, others, DivSign::Negated)
}

pub fn diversity_loss_signed(pred: &Tensor, others: &Tensor, sign: DivSign) -> Result<f64> {
    check_probabilities(pred, "prediction")?;
    if others.shape().len() != 2 || others.shape()[0] == 0 {
        log::warn!("diversity loss with no other samples in the batch; returning 0");
        return Ok(0.0);
    }
    check_probabilities(others, "batch prediction")?;
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let o = tape.constant(others.clone());
    let out = diversity_loss_on(&mut tape, p, o, sign)?;
    Ok(tape.value(out).item())
}

/// Batch mean of the per-sample dispersion term, where each row of `preds`
/// `[B, K]` is compared with the other `B - 1` rows. Uses
/// `Σ_i Σ_{s≠i} ||p_i - p_s||² = 2B Σ_i ||p_i||² - 2 ||Σ_i p_i||²`.
pub fn batch_diversity_on(tape: &mut Tape, preds: Var, sign: DivSign) -> Result<Var> {
    let b = tape.value(preds).shape()[0];
    if b < 2 {
        log::warn!("diversity loss with a batch of one; returning 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let sq = tape.mul(preds, preds)?;
    let self_sq = tape.sum(sq);
    let col = tape.sum_axis(preds, 0)?;
    let col_sq = tape.mul(col, col)?;
    let cross = tape.sum(col_sq);
    let a = tape.scale(self_sq, 2.0 * b as f64);
    let c = tape.scale(cross, 2.0);
    let pair_total = tape.sub(a, c)?;
    let bf = b as f64;
    Ok(tape.scale(pair_total, sign_factor(sign) / (bf * (bf - 1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    fn vec1(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::new(&[n], v).unwrap()
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let logits = Tensor::from_rows(&[vec![800.0, 0.0, 0.0]]).unwrap();
        assert_eq!(smoothed_cross_entropy(&logits, &[0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[4, 7]);
        let l = smoothed_cross_entropy(&logits, &[0, 3, 6, 2], 0.0).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn smoothed_two_class_hand_value() {
        // Target class 0, logits [16, -16], eps = 0.1:
        // targets [0.95, 0.05], log p = [-ln(1+e^-32), -32 - ln(1+e^-32)].
        let logits = Tensor::from_rows(&[vec![16.0, -16.0]]).unwrap();
        let l = smoothed_cross_entropy(&logits, &[0], 0.1).unwrap();
        let lse = (-32f64).exp().ln_1p();
        let want = 0.95 * lse + 0.05 * (32.0 + lse);
        assert!((l - want).abs() < 1e-14, "{l} vs {want}");
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(smoothed_cross_entropy(&logits, &[3], 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn kl_worked_value() {
        let p = vec1(vec![0.5, 0.5]);
        let n = Tensor::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let l = similarity_loss(&p, &n).unwrap();
        assert!((l - 0.5 * (4f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_at_neighbor_mean() {
        let p = vec1(vec![0.3, 0.5, 0.2]);
        let n = Tensor::from_rows(&[vec![0.2, 0.6, 0.2], vec![0.4, 0.4, 0.2]]).unwrap();
        assert!(similarity_loss(&p, &n).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let k = rng.random_range(2..12);
            let p = vec1(prob(&mut rng, k));
            let q = Tensor::new(&[1, k], prob(&mut rng, k)).unwrap();
            assert!(similarity_loss(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn unnormalized_input_is_contract_error() {
        let p = vec1(vec![0.5, 0.6]);
        let n = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(matches!(similarity_loss(&p, &n), Err(Error::Contract(_))));
    }

    #[test]
    fn diversity_cases() {
        let p = vec1(vec![1.0, 0.0]);
        let o = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(diversity_loss(&p, &o).unwrap(), -2.0);
        assert_eq!(diversity_loss_signed(&p, &o, DivSign::Literal).unwrap(), 2.0);

        let same = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(diversity_loss(&p, &same).unwrap(), 0.0);

        let empty = Tensor::zeros(&[0, 2]);
        assert_eq!(diversity_loss(&p, &empty).unwrap(), 0.0);
    }

    #[test]
    fn diversity_symmetric_for_single_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, b) = (prob(&mut rng, 5), prob(&mut rng, 5));
            let x = diversity_loss(&vec1(a.clone()), &Tensor::new(&[1, 5], b.clone()).unwrap()).unwrap();
            let y = diversity_loss(&vec1(b), &Tensor::new(&[1, 5], a).unwrap()).unwrap();
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_form_matches_per_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, k) = (9, 4);
        let rows: Vec<Vec<f64>> = (0..b).map(|_| prob(&mut rng, k)).collect();
        let mut per_sample = 0.0;
        for i in 0..b {
            let others: Vec<Vec<f64>> = rows.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
            per_sample += diversity_loss(&vec1(rows[i].clone()), &Tensor::from_rows(&others).unwrap()).unwrap();
        }
        per_sample /= b as f64;
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&rows).unwrap());
        let v = batch_diversity_on(&mut tape, p, DivSign::Negated).unwrap();
        assert!((tape.value(v).item() - per_sample).abs() < 1e-12);
        assert!(per_sample <= 0.0);
    }
}
