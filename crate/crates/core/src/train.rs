//! Loss-and-gradient evaluation, the finite-difference oracle, and the
//! SGD training loops.

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{build_model, Arch, Model};
use crate::optim::{sgd_update, LrSchedule, OptimState, SgdHyper};
use crate::seeds::derive_seed;
use crate::tape::Tape;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Global-norm gradient cap for the main training loop, well above the
/// ordinary per-batch norm at this scale.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Loss applied on top of the model's logits for one batch.
pub enum LossSpec<'a> {
    CrossEntropy,
    /// Negated cross-entropy: descent on it is gradient ascent on the
    /// task loss.
    NegCrossEntropy,
    /// KL from fixed teacher logits at the given temperature.
    Distill { teacher_logits: &'a Tensor, temperature: f64 },
    /// Distillation plus ce_weight · cross-entropy on the same batch.
    DistillPlusCe { teacher_logits: &'a Tensor, temperature: f64, ce_weight: f64 },
}

/// Mean batch loss and one gradient tensor per trainable parameter.
pub fn forward_backward(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    spec: &LossSpec,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let (logits, leaves) = model.forward_tape(&mut tape, inputs)?;
    let root = match spec {
        LossSpec::CrossEntropy => tape.cross_entropy(logits, labels)?,
        LossSpec::NegCrossEntropy => {
            let ce = tape.cross_entropy(logits, labels)?;
            tape.scaled_sum(&[(-1.0, ce)])?
        }
        LossSpec::Distill { teacher_logits, temperature } => {
            tape.distill_kl(logits, teacher_logits, *temperature)?
        }
        LossSpec::DistillPlusCe { teacher_logits, temperature, ce_weight } => {
            let kl = tape.distill_kl(logits, teacher_logits, *temperature)?;
            let ce = tape.cross_entropy(logits, labels)?;
            tape.scaled_sum(&[(1.0, kl), (*ce_weight, ce)])?
        }
    };
    let loss_value = tape.value(root).data()[0];
    let all = tape.backward(root)?;
    let grads = leaves.into_iter().map(|(name, id)| (name, all[id.0].clone())).collect();
    Ok((loss_value, grads))
}

/// Batch loss without gradients, via the plain forward path.
pub fn batch_loss(model: &Model, inputs: &Tensor, labels: &[usize], spec: &LossSpec) -> Result<f64> {
    let logits = model.forward(inputs)?;
    match spec {
        LossSpec::CrossEntropy => loss::cross_entropy(&logits, labels),
        LossSpec::NegCrossEntropy => Ok(-loss::cross_entropy(&logits, labels)?),
        LossSpec::Distill { teacher_logits, temperature } => {
            loss::kl_distill_loss_at(&logits, teacher_logits, *temperature)
        }
        LossSpec::DistillPlusCe { teacher_logits, temperature, ce_weight } => {
            let kl = loss::kl_distill_loss_at(&logits, teacher_logits, *temperature)?;
            let ce = loss::cross_entropy(&logits, labels)?;
            Ok(kl + ce_weight * ce)
        }
    }
}

/// Central-difference derivative of a scalar function, the primitive
/// behind the gradient oracle.
pub fn finite_diff_scalar(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Central-difference gradient estimate for every parameter coordinate.
/// The independent check on the tape: it only exercises the plain
/// forward path.
pub fn finite_diff_grad(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    spec: &LossSpec,
    eps: f64,
) -> Result<IndexMap<String, Tensor>> {
    if eps <= 0.0 {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let mut probe = model.clone();
    let mut out = IndexMap::new();
    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        let numel = probe.params[&name].numel();
        let mut grad = vec![0.0; numel];
        for i in 0..numel {
            let orig = probe.params[&name].data()[i];
            probe.params[&name].data_mut()[i] = orig + eps;
            let hi = batch_loss(&probe, inputs, labels, spec)?;
            probe.params[&name].data_mut()[i] = orig - eps;
            let lo = batch_loss(&probe, inputs, labels, spec)?;
            probe.params[&name].data_mut()[i] = orig;
            grad[i] = (hi - lo) / (2.0 * eps);
        }
        let shape = model.params[&name].shape().to_vec();
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Epoch-shuffled batch cursor. Reshuffles whenever fewer than a full
/// batch remains, so every sample is visited about equally often.
pub struct BatchSampler {
    indices: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptySet("batch sampler source".into()));
        }
        if batch == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..len).collect();
        indices.shuffle(&mut rng);
        Ok(BatchSampler { indices, cursor: 0, batch: batch.min(len), rng })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = &self.indices[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        out
    }
}

/// Train a fresh model on the set with the full schedule: the original
/// learning algorithm. Deterministic in (arch, set, hyper, seed).
pub fn train_model(arch: &Arch, set: &SampleSet, hyper: &SgdHyper, seed: u64) -> Result<Model> {
    let model = build_model(arch, derive_seed(seed, "init"))?;
    continue_training(&model, set, hyper, derive_seed(seed, "batches"))
}

/// Run the SGD loop from an existing model; the schedule restarts at
/// step 0 over hyper.total_steps.
pub fn continue_training(
    model: &Model,
    set: &SampleSet,
    hyper: &SgdHyper,
    batch_seed: u64,
) -> Result<Model> {
    if set.is_empty() {
        return Err(Error::EmptySet("training set".into()));
    }
    let mut model = model.clone();
    let mut state = OptimState::new(hyper.clone(), &model.params)?;
    let mut sampler = BatchSampler::new(set.len(), hyper.batch_size, batch_seed)?;
    for _ in 0..hyper.total_steps {
        let rows = sampler.next_batch().to_vec();
        let (inputs, labels) = set.batch(&rows);
        let (_, mut grads) = forward_backward(&model, &inputs, &labels, &LossSpec::CrossEntropy)?;
        // A rare spiked batch early in warmup can kill every ReLU path
        // at once; the cap leaves ordinary steps untouched.
        clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        sgd_update(&mut model.params, &grads, &mut state)?;
    }
    Ok(model)
}

/// Mean cross-entropy over a whole set, evaluated in bounded chunks.
pub fn mean_loss(model: &Model, set: &SampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet("loss evaluation set".into()));
    }
    let mut total = 0.0;
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(256) {
        let (inputs, labels) = set.batch(chunk);
        total += batch_loss(model, &inputs, &labels, &LossSpec::CrossEntropy)? * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) {
    let sq: f64 = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Convenience for tests and examples: a constant-rate hyper block.
pub fn constant_hyper(lr: f64, batch_size: usize, total_steps: usize) -> SgdHyper {
    SgdHyper {
        learning_rate: lr,
        batch_size,
        total_steps,
        schedule: LrSchedule::Constant,
        ..SgdHyper::default()
    }
}
