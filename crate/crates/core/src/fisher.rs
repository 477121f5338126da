//! Diagonal Fisher information estimate: per-parameter importance as
//! the mean squared per-sample gradient of the training loss.

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::model::{flatten_params, Model};
use crate::train::{forward_backward, LossSpec};
use rayon::prelude::*;

/// Mean over samples of the squared gradient of the per-sample
/// cross-entropy, flattened to registry order. Labels are taken as they
/// appear in the set (the training-time labels; true labels are not
/// assumed known).
///
/// Samples are processed in fixed chunks whose partial sums are folded
/// in chunk order, so the result is bitwise identical for any worker
/// count.
pub fn fim_diag(model: &Model, set: &SampleSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptySet("importance estimation set".into()));
    }
    let p = model.num_params();
    let rows: Vec<usize> = (0..set.len()).collect();
    let partials: Vec<Result<Vec<f64>>> = rows
        .par_chunks(64)
        .map(|chunk| {
            let mut acc = vec![0.0; p];
            for &i in chunk {
                let (inputs, labels) = set.batch(&[i]);
                let (_, grads) = forward_backward(model, &inputs, &labels, &LossSpec::CrossEntropy)?;
                let mut off = 0;
                for g in grads.values() {
                    for &v in g.data() {
                        acc[off] += v * v;
                        off += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; p];
    for partial in partials {
        let partial = partial?;
        for (t, v) in total.iter_mut().zip(partial) {
            *t += v;
        }
    }
    let n = set.len() as f64;
    for t in &mut total {
        *t /= n;
    }
    Ok(total)
}

/// Straight-line reference: one sample at a time, no chunking, square
/// and average. The independent check on `fim_diag`.
pub fn fim_diag_bruteforce(model: &Model, set: &SampleSet) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::EmptySet("importance estimation set".into()));
    }
    let p = model.num_params();
    let mut total = vec![0.0; p];
    for i in 0..set.len() {
        let (inputs, labels) = set.batch(&[i]);
        let (_, grads) = forward_backward(model, &inputs, &labels, &LossSpec::CrossEntropy)?;
        let flat: Vec<f64> = grads.values().flat_map(|g| g.data().iter().copied()).collect();
        for (t, v) in total.iter_mut().zip(flat) {
            *t += v * v;
        }
    }
    let n = set.len() as f64;
    for t in &mut total {
        *t /= n;
    }
    Ok(total)
}

/// Importance vectors are addressed like the flat parameter vector.
pub fn importance_len(model: &Model) -> usize {
    flatten_params(model).0.len()
}
