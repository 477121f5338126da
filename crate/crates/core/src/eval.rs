//! Metrics: clean-label accuracies over the affected and unaffected
//! domains, deletion change, and the hyperparameter-selection score.

use crate::data::{AffectedDomainSets, ManipKind, ManipulatedDataset, SampleSet};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model};
use serde::{Deserialize, Serialize};

/// Number of samples whose predicted label equals the stored label.
/// Evaluated in bounded chunks.
fn correct_count(model: &Model, set: &SampleSet) -> Result<usize> {
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0usize;
    for chunk in rows.chunks(256) {
        let (inputs, labels) = set.batch(chunk);
        let logits = model.forward(&inputs)?;
        let predicted = argmax_rows(&logits);
        correct += predicted.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct)
}

/// Fraction of samples whose predicted label equals the stored label.
pub fn clean_label_accuracy(model: &Model, set: &SampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet("accuracy evaluation set".into()));
    }
    Ok(correct_count(model, set)? as f64 / set.len() as f64)
}

/// Fraction of the forget set where the prediction differs from the
/// training-time (manipulated) label. Computed as a count ratio, so the
/// result is the correctly rounded value of that rational.
pub fn deletion_change(model: &Model, forget_with_training_labels: &SampleSet) -> Result<f64> {
    if forget_with_training_labels.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let n = forget_with_training_labels.len();
    let changed = n - correct_count(model, forget_with_training_labels)?;
    Ok(changed as f64 / n as f64)
}

/// Weighted average of deletion change and validation accuracy.
pub fn selection_score(dc: f64, val_acc: f64, weight: f64) -> Result<f64> {
    for (name, v) in [("deletion change", dc), ("validation accuracy", val_acc), ("weight", weight)]
    {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::MetricRange { name: name.into(), value: v });
        }
    }
    Ok(weight * dc + (1.0 - weight) * val_acc)
}

/// One result row. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub manipulation: String,
    pub n: usize,
    pub sf_fraction: f64,
    pub repetition: usize,
    pub seed: u64,
    pub acc_dm_test: f64,
    pub acc_sm_clean: f64,
    pub acc_utility: f64,
    pub val_acc: f64,
    pub deletion_change: f64,
    pub selection_score: f64,
    pub wall_time_seconds: f64,
    pub hyperparams_json: String,
}

/// All metrics for one unlearned (or original) model. Identity fields
/// the harness owns (method, fraction, repetition, seed, wall time,
/// hyperparameters) are left at placeholder values.
pub fn evaluate_run(
    mu: &Model,
    md: &ManipulatedDataset,
    affected: &AffectedDomainSets,
    selection_weight: f64,
) -> Result<EvalReport> {
    check_consistency(md, affected)?;
    let forget = md.forget_set();
    if forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let acc_dm_test = clean_label_accuracy(mu, &affected.dm_test)?;
    let acc_sm_clean = clean_label_accuracy(mu, &affected.sm_clean)?;
    let acc_utility = clean_label_accuracy(mu, &affected.utility_test)?;
    let val_acc = clean_label_accuracy(mu, &md.data.val)?;
    let dc = deletion_change(mu, &forget)?;
    let score = selection_score(dc, val_acc, selection_weight)?;
    Ok(EvalReport {
        method: String::new(),
        manipulation: md.spec.kind.to_string(),
        n: md.spec.n,
        sf_fraction: 0.0,
        repetition: 0,
        seed: 0,
        acc_dm_test,
        acc_sm_clean,
        acc_utility,
        val_acc,
        deletion_change: dc,
        selection_score: score,
        wall_time_seconds: 0.0,
        hyperparams_json: "{}".into(),
    })
}

/// The affected sets must have been built from this manipulated
/// dataset; size relations expose a foreign pairing.
fn check_consistency(md: &ManipulatedDataset, affected: &AffectedDomainSets) -> Result<()> {
    let test_len = md.data.test.len();
    let shape_ok = match md.spec.kind {
        ManipKind::Poison => {
            affected.dm_test.len() == test_len && affected.utility_test.len() == test_len
        }
        ManipKind::InterclassConfusion => {
            affected.dm_test.len() + affected.utility_test.len() == test_len
        }
    };
    let manipulated = md.manipulated_indices().len();
    if !shape_ok || affected.sm_clean.len() != manipulated {
        return Err(Error::ProvenanceMismatch(format!(
            "affected sets (dm {}, utility {}, sm {}) do not match dataset (test {}, manipulated {})",
            affected.dm_test.len(),
            affected.utility_test.len(),
            affected.sm_clean.len(),
            test_len,
            manipulated
        )));
    }
    Ok(())
}
