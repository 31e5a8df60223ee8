//! Loss functions for source training and the adversarial game.
//!
//! Every log and ratio argument is clamped to [`CLAMP_EPS`] so losses stay
//! finite even when a head saturates. The `*_grad_logits` companions give the
//! analytic gradient with respect to the pre-softmax logits; they are exact
//! whenever the clamp is inactive, which holds for softmax outputs bounded
//! away from zero.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::tensor::CLAMP_EPS;
use serde::{Deserialize, Serialize};

fn check_probability_rows(probs: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Numerical(format!(
                "{what} row {i} is not a probability distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy(probs: &Array2<f64>, labels: &[u8]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::Numerical(format!(
            "probability rows {} do not match label count {}",
            probs.nrows(),
            labels.len()
        )));
    }
    check_probability_rows(probs, "cross_entropy")?;
    let mut acc = 0.0;
    for (row, &label) in probs.axis_iter(Axis(0)).zip(labels) {
        acc -= row[label as usize].max(CLAMP_EPS).ln();
    }
    Ok(acc / labels.len() as f64)
}

/// d(cross_entropy)/d(logits) assuming `probs = softmax(logits)`.
pub fn cross_entropy_grad_logits(probs: &Array2<f64>, labels: &[u8]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        grad[[i, label as usize]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n);
    grad
}

/// Discriminator objective: recognise source rows (index 0) as source and
/// target rows (index 1) as target.
pub fn discriminator_loss(d_source: &Array2<f64>, d_target: &Array2<f64>) -> Result<f64> {
    if d_source.nrows() == 0 || d_target.nrows() == 0 {
        return Err(Error::Numerical("discriminator_loss needs rows on both sides".into()));
    }
    check_probability_rows(d_source, "discriminator_loss source")?;
    check_probability_rows(d_target, "discriminator_loss target")?;
    let src: f64 = d_source
        .axis_iter(Axis(0))
        .map(|row| -row[0].max(CLAMP_EPS).ln())
        .sum::<f64>()
        / d_source.nrows() as f64;
    let tgt: f64 = d_target
        .axis_iter(Axis(0))
        .map(|row| -row[1].max(CLAMP_EPS).ln())
        .sum::<f64>()
        / d_target.nrows() as f64;
    Ok(src + tgt)
}

/// Logit gradients for both sides of [`discriminator_loss`].
pub fn discriminator_loss_grad_logits(
    d_source: &Array2<f64>,
    d_target: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let ns = d_source.nrows() as f64;
    let nt = d_target.nrows() as f64;
    let mut g_src = d_source.clone();
    for mut row in g_src.axis_iter_mut(Axis(0)) {
        row[0] -= 1.0;
    }
    g_src.mapv_inplace(|v| v / ns);
    let mut g_tgt = d_target.clone();
    for mut row in g_tgt.axis_iter_mut(Axis(0)) {
        row[1] -= 1.0;
    }
    g_tgt.mapv_inplace(|v| v / nt);
    (g_src, g_tgt)
}

/// Inverted-label mapping loss: the target encoder is rewarded when the
/// discriminator calls its features "source".
pub fn adversarial_encoder_loss(d_target: &Array2<f64>) -> f64 {
    if d_target.nrows() == 0 {
        return 0.0;
    }
    d_target
        .axis_iter(Axis(0))
        .map(|row| -row[0].max(CLAMP_EPS).ln())
        .sum::<f64>()
        / d_target.nrows() as f64
}

/// Logit gradient of [`adversarial_encoder_loss`].
pub fn adversarial_encoder_loss_grad_logits(d_target: &Array2<f64>) -> Array2<f64> {
    let n = d_target.nrows() as f64;
    let mut grad = d_target.clone();
    for mut row in grad.axis_iter_mut(Axis(0)) {
        row[0] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n);
    grad
}

/// Direction of the encoder-measurer divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// KL(source hypothesis ‖ target hypothesis) — the default.
    Forward,
    /// KL(target hypothesis ‖ source hypothesis).
    Reverse,
}

/// Mean KL divergence between the source and target classifier hypotheses on
/// the same source batch: `Σᵢ pᵢ ln(pᵢ/qᵢ)` averaged over rows, with
/// `0·ln 0 := 0`.
pub fn kld_measurer_loss(source_hyp: &Array2<f64>, target_hyp: &Array2<f64>) -> Result<f64> {
    if source_hyp.dim() != target_hyp.dim() {
        return Err(Error::Numerical(format!(
            "hypothesis shape mismatch: {:?} vs {:?}",
            source_hyp.dim(),
            target_hyp.dim()
        )));
    }
    let mut acc = 0.0;
    for (p_row, q_row) in source_hyp.axis_iter(Axis(0)).zip(target_hyp.axis_iter(Axis(0))) {
        for (&p, &q) in p_row.iter().zip(q_row.iter()) {
            if p > 0.0 {
                acc += p * (p.max(CLAMP_EPS).ln() - q.max(CLAMP_EPS).ln());
            }
        }
    }
    Ok(acc / source_hyp.nrows() as f64)
}

/// Gradient of the measurer loss with respect to the **target** logits, with
/// the source hypothesis held fixed.
///
/// Forward direction: d/dz KL(p‖softmax(z)) = (q − p)/n.
/// Reverse direction: d/dz KL(softmax(z)‖p) = q ⊙ (ln(q/p) − KL)/n per row.
pub fn kld_grad_target_logits(
    source_hyp: &Array2<f64>,
    target_hyp: &Array2<f64>,
    direction: KldDirection,
) -> Array2<f64> {
    let n = source_hyp.nrows() as f64;
    match direction {
        KldDirection::Forward => {
            let mut grad = target_hyp - source_hyp;
            grad.mapv_inplace(|v| v / n);
            grad
        }
        KldDirection::Reverse => {
            let mut grad = Array2::<f64>::zeros(target_hyp.raw_dim());
            for (i, (q_row, p_row)) in target_hyp
                .axis_iter(Axis(0))
                .zip(source_hyp.axis_iter(Axis(0)))
                .enumerate()
            {
                let kl: f64 = q_row
                    .iter()
                    .zip(p_row.iter())
                    .filter(|(&q, _)| q > 0.0)
                    .map(|(&q, &p)| q * (q.max(CLAMP_EPS).ln() - p.max(CLAMP_EPS).ln()))
                    .sum();
                for (j, (&q, &p)) in q_row.iter().zip(p_row.iter()).enumerate() {
                    let log_ratio = q.max(CLAMP_EPS).ln() - p.max(CLAMP_EPS).ln();
                    grad[[i, j]] = q * (log_ratio - kl) / n;
                }
            }
            grad
        }
    }
}

/// Measurer loss in the configured direction.
pub fn kld_directed(
    source_hyp: &Array2<f64>,
    target_hyp: &Array2<f64>,
    direction: KldDirection,
) -> Result<f64> {
    match direction {
        KldDirection::Forward => kld_measurer_loss(source_hyp, target_hyp),
        KldDirection::Reverse => kld_measurer_loss(target_hyp, source_hyp),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let probs = array![[1.0, 0.0]];
        let loss = cross_entropy(&probs, &[0]).unwrap();
        assert!(loss <= 1e-7, "loss {loss}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let probs = array![[0.5, 0.5]];
        let loss = cross_entropy(&probs, &[1]).unwrap();
        assert!((loss - LN2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_mixed_batch_mean() {
        let probs = array![[1.0, 0.0], [0.5, 0.5]];
        let loss = cross_entropy(&probs, &[0, 0]).unwrap();
        assert!((loss - LN2 / 2.0).abs() < 1e-4, "loss {loss} vs ~0.3466");
    }

    #[test]
    fn cross_entropy_rejects_non_probability_rows() {
        let probs = array![[0.9, 0.3]];
        assert!(cross_entropy(&probs, &[0]).is_err());
    }

    #[test]
    fn discriminator_perfect_vs_uniform() {
        let perfect_src = array![[1.0, 0.0]];
        let perfect_tgt = array![[0.0, 1.0]];
        let loss = discriminator_loss(&perfect_src, &perfect_tgt).unwrap();
        assert!(loss <= 2e-7, "loss {loss}");

        let uniform = array![[0.5, 0.5], [0.5, 0.5]];
        let loss = discriminator_loss(&uniform, &uniform).unwrap();
        assert!((loss - 2.0 * LN2).abs() < 1e-6);
    }

    #[test]
    fn discriminator_fully_fooled_is_finite() {
        let fooled_src = array![[0.0, 1.0]];
        let fooled_tgt = array![[1.0, 0.0]];
        let loss = discriminator_loss(&fooled_src, &fooled_tgt).unwrap();
        let expected = 2.0 * -(crate::tensor::CLAMP_EPS.ln());
        assert!((loss - expected).abs() < 1e-9);
        assert!(loss.is_finite());
    }

    #[test]
    fn discriminator_empty_side_errors() {
        let some = array![[0.5, 0.5]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(discriminator_loss(&some, &empty).is_err());
        assert!(discriminator_loss(&empty, &some).is_err());
    }

    #[test]
    fn adversarial_loss_cases() {
        let fooled = array![[1.0, 0.0]];
        assert!(adversarial_encoder_loss(&fooled) <= 1e-7);

        let uniform = array![[0.5, 0.5]];
        assert!((adversarial_encoder_loss(&uniform) - LN2).abs() < 1e-6);

        let quarter = array![[0.25, 0.75], [0.25, 0.75]];
        assert!((adversarial_encoder_loss(&quarter) - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn kld_identity_is_zero() {
        let p = array![[0.3, 0.7], [0.9, 0.1]];
        let loss = kld_measurer_loss(&p, &p).unwrap();
        assert!(loss.abs() < 1e-10);
    }

    #[test]
    fn kld_handles_zero_mass() {
        let p = array![[1.0, 0.0]];
        let q = array![[0.5, 0.5]];
        let loss = kld_measurer_loss(&p, &q).unwrap();
        assert!((loss - LN2).abs() < 1e-6);
    }

    #[test]
    fn kld_is_asymmetric() {
        let p = array![[0.9, 0.1]];
        let q = array![[0.5, 0.5]];
        let forward = kld_measurer_loss(&p, &q).unwrap();
        let reverse = kld_measurer_loss(&q, &p).unwrap();
        assert!((forward - 0.3681).abs() < 1e-4, "forward {forward}");
        assert!((reverse - 0.5108).abs() < 1e-4, "reverse {reverse}");
    }

    #[test]
    fn kld_non_negative_on_random_distributions() {
        use rand::Rng;
        let mut rng = crate::tensor::stage_rng(0, crate::tensor::Stage::Init);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(0.001..0.999);
            let b: f64 = rng.gen_range(0.001..0.999);
            let p = array![[a, 1.0 - a]];
            let q = array![[b, 1.0 - b]];
            let loss = kld_measurer_loss(&p, &q).unwrap();
            assert!(loss >= -1e-12, "KL(p‖q) = {loss} for a={a}, b={b}");
        }
    }

    #[test]
    fn kld_shape_mismatch_errors() {
        let p = array![[0.5, 0.5]];
        let q = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(kld_measurer_loss(&p, &q).is_err());
    }
}
