//! Classification and distillation losses, mean-reduced over the batch.

use crate::error::{Error, Result};
use crate::tensor::{logsumexp_rows, softmax_rows, Tensor};

/// Mean softmax cross-entropy of (n, k) logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits_dims(logits)?;
    check_labels(labels, n, k)?;
    Ok(ce_forward(logits.data(), labels, n, k).0)
}

/// Mean over rows of KL(softmax(teacher) ‖ softmax(student)) at unit
/// temperature. Teacher is treated as a constant.
pub fn kl_distill_loss(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<f64> {
    kl_distill_loss_at(student_logits, teacher_logits, 1.0)
}

/// Temperature-scaled variant: both logit sets are divided by `t` before
/// the softmax.
pub fn kl_distill_loss_at(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    t: f64,
) -> Result<f64> {
    let (n, k) = logits_dims(student_logits)?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", student_logits.shape()),
            got: format!("{:?}", teacher_logits.shape()),
        });
    }
    if t <= 0.0 {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
    }
    let teacher_probs = scaled_softmax(teacher_logits.data(), n, k, t);
    Ok(kl_forward(student_logits.data(), &teacher_probs, n, k, t).0)
}

pub(crate) fn logits_dims(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [n, k] if *n > 0 => Ok((*n, *k)),
        [0, _] => Err(Error::EmptyBatch),
        other => Err(Error::ShapeMismatch {
            expected: "rank-2 logits (batch, classes)".into(),
            got: format!("{other:?}"),
        }),
    }
}

pub(crate) fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: k });
    }
    Ok(())
}

/// Returns (loss, softmax probabilities); the probabilities feed the
/// backward rule d/dz_ij = (p_ij − 1{j = y_i}) / n.
pub(crate) fn ce_forward(logits: &[f64], labels: &[usize], n: usize, k: usize) -> (f64, Vec<f64>) {
    let lse = logsumexp_rows(logits, n, k);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += lse[i] - logits[i * k + y];
    }
    (loss / n as f64, softmax_rows(logits, n, k))
}

pub(crate) fn scaled_softmax(logits: &[f64], n: usize, k: usize, t: f64) -> Vec<f64> {
    if t == 1.0 {
        softmax_rows(logits, n, k)
    } else {
        let scaled: Vec<f64> = logits.iter().map(|&z| z / t).collect();
        softmax_rows(&scaled, n, k)
    }
}

/// Returns (loss, student probabilities at temperature `t`); the
/// probabilities feed the backward rule d/ds_ij = (ps_ij − pt_ij)/(n·t).
pub(crate) fn kl_forward(
    student_logits: &[f64],
    teacher_probs: &[f64],
    n: usize,
    k: usize,
    t: f64,
) -> (f64, Vec<f64>) {
    let scaled: Vec<f64>;
    let s = if t == 1.0 {
        student_logits
    } else {
        scaled = student_logits.iter().map(|&z| z / t).collect();
        &scaled
    };
    let lse = logsumexp_rows(s, n, k);
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..k {
            let pt = teacher_probs[i * k + j];
            if pt > 0.0 {
                let log_ps = s[i * k + j] - lse[i];
                loss += pt * (pt.ln() - log_ps);
            }
        }
    }
    // KL is non-negative; rounding can leave a tiny negative residue.
    (((loss / n as f64).max(0.0)), softmax_rows(s, n, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        let loss = cross_entropy(&logits, &[0, 1, 0]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_inputs() {
        let logits = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(cross_entropy(&logits, &[0, 3]).is_err());
        assert!(cross_entropy(&logits, &[0]).is_err());
        let empty = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(cross_entropy(&empty, &[]).is_err());
    }

    #[test]
    fn kl_zero_when_student_matches_teacher() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -0.5, 0.2, 3.0, 3.0, 3.0]).unwrap();
        assert!(kl_distill_loss(&t, &t).unwrap() < 1e-12);
    }

    #[test]
    fn kl_invariant_to_constant_logit_shift() {
        let teacher = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let student = Tensor::new(vec![1, 2], vec![7.5, 7.5]).unwrap();
        assert!(kl_distill_loss(&student, &teacher).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_hand_computed_two_class_case() {
        // teacher probs (0.5, 0.5), student probs (0.9, 0.1):
        // 0.5·ln(0.5/0.9) + 0.5·ln(0.5/0.1) ≈ 0.5108256.
        let teacher = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let student = Tensor::new(vec![1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let loss = kl_distill_loss(&student, &teacher).unwrap();
        assert!((loss - 0.510825623765991).abs() < 1e-12);
    }

    #[test]
    fn temperature_softens_the_penalty() {
        let teacher = Tensor::new(vec![1, 2], vec![2.0, -2.0]).unwrap();
        let student = Tensor::new(vec![1, 2], vec![-2.0, 2.0]).unwrap();
        let sharp = kl_distill_loss_at(&student, &teacher, 1.0).unwrap();
        let soft = kl_distill_loss_at(&student, &teacher, 4.0).unwrap();
        assert!(soft < sharp);
        assert!(soft > 0.0);
    }
}
