//! The five unlearning procedures: exact retraining, finetuning-induced
//! forgetting, Fisher-based weight dampening, random-teacher
//! distillation, and alternating ascent/preservation.
//!
//! Every procedure maps (M_o, manipulated dataset with its forget set,
//! config) to a fresh unlearned model and never mutates its inputs.

use crate::data::ManipulatedDataset;
use crate::error::{Error, Result};
use crate::fisher::fim_diag;
use crate::model::{build_model, flatten_params, unflatten_params, Model};
use crate::optim::{sgd_update, LrSchedule, OptimState, SgdHyper};
use crate::seeds::derive_seed;
use crate::train::{clip_grad_norm, continue_training, forward_backward, train_model, BatchSampler, LossSpec};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "EU")]
    ExactUnlearning,
    #[serde(rename = "CF")]
    CatastrophicForgetting,
    #[serde(rename = "SSD")]
    Ssd,
    #[serde(rename = "BadT")]
    BadTeacher,
    #[serde(rename = "SCRUB")]
    Scrub,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ExactUnlearning,
        Method::CatastrophicForgetting,
        Method::Ssd,
        Method::BadTeacher,
        Method::Scrub,
    ];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::ExactUnlearning => "EU",
            Method::CatastrophicForgetting => "CF",
            Method::Ssd => "SSD",
            Method::BadTeacher => "BadT",
            Method::Scrub => "SCRUB",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EU" => Ok(Method::ExactUnlearning),
            "CF" => Ok(Method::CatastrophicForgetting),
            "SSD" => Ok(Method::Ssd),
            "BADT" => Ok(Method::BadTeacher),
            "SCRUB" => Ok(Method::Scrub),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Unlearning steps for the finetuning-style procedures.
    pub steps: usize,
    pub ssd_alpha: f64,
    pub ssd_gamma: f64,
    pub scrub_alpha: f64,
    /// Ascent steps run only at the start of the schedule.
    pub scrub_forget_steps: usize,
    pub scrub_lr: f64,
    /// Distillation temperature for the teacher-based losses.
    pub temperature: f64,
    pub seed: u64,
}

impl MethodConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        MethodConfig {
            method,
            steps: 1000,
            ssd_alpha: 10.0,
            ssd_gamma: 10.0,
            scrub_alpha: 0.1,
            scrub_forget_steps: 200,
            scrub_lr: 0.0025,
            temperature: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scrub_forget_steps > self.steps {
            return Err(Error::InvalidConfig(format!(
                "scrub_forget_steps {} exceeds steps {}",
                self.scrub_forget_steps, self.steps
            )));
        }
        if self.ssd_alpha <= 0.0 || self.ssd_gamma <= 0.0 {
            return Err(Error::InvalidConfig("ssd_alpha and ssd_gamma must be positive".into()));
        }
        if self.scrub_alpha < 0.0 {
            return Err(Error::InvalidConfig("scrub_alpha must be non-negative".into()));
        }
        if self.scrub_lr <= 0.0 {
            return Err(Error::InvalidConfig("scrub_lr must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    /// The hyperparameters that identify a grid point, as compact JSON.
    pub fn hyperparams_json(&self) -> String {
        let v = match self.method {
            Method::ExactUnlearning | Method::CatastrophicForgetting => {
                serde_json::json!({ "steps": self.steps })
            }
            Method::Ssd => {
                serde_json::json!({ "ssd_alpha": self.ssd_alpha, "ssd_gamma": self.ssd_gamma })
            }
            Method::BadTeacher => {
                serde_json::json!({ "steps": self.steps, "temperature": self.temperature })
            }
            Method::Scrub => serde_json::json!({
                "scrub_alpha": self.scrub_alpha,
                "scrub_forget_steps": self.scrub_forget_steps,
                "scrub_lr": self.scrub_lr,
                "steps": self.steps,
            }),
        };
        v.to_string()
    }

    /// Numeric key for deterministic tie-breaking across a grid.
    pub fn grid_key(&self) -> Vec<f64> {
        match self.method {
            Method::Ssd => vec![self.ssd_alpha, self.ssd_gamma],
            Method::Scrub => vec![self.scrub_alpha],
            _ => vec![self.steps as f64],
        }
    }
}

/// Shared inputs of every procedure.
pub struct UnlearnContext<'a> {
    pub mo: &'a Model,
    pub md: &'a ManipulatedDataset,
    /// Hyperparameters the original model was trained with.
    pub hyper: &'a SgdHyper,
    /// Seed the original model was trained with; exact retraining
    /// reruns the identical procedure under it.
    pub train_seed: u64,
}

#[derive(Clone, Debug)]
pub struct UnlearnResult {
    pub model: Model,
    pub wall_time_seconds: f64,
    pub config: MethodConfig,
    pub diagnostics: IndexMap<String, f64>,
}

impl UnlearnResult {
    fn new(model: Model, started: Instant, config: MethodConfig) -> Self {
        UnlearnResult {
            model,
            wall_time_seconds: started.elapsed().as_secs_f64(),
            config,
            diagnostics: IndexMap::new(),
        }
    }
}

/// Dispatch a configured procedure.
pub fn run_method(ctx: &UnlearnContext, config: &MethodConfig) -> Result<UnlearnResult> {
    config.validate()?;
    match config.method {
        Method::ExactUnlearning => exact_unlearn(ctx, config),
        Method::CatastrophicForgetting => catastrophic_forget(ctx, config),
        Method::Ssd => ssd_unlearn(ctx, config),
        Method::BadTeacher => badt_unlearn(ctx, config),
        Method::Scrub => scrub_unlearn(ctx, config),
    }
}

/// Retrain from scratch on the retained samples with the full original
/// schedule and seed.
pub fn exact_unlearn(ctx: &UnlearnContext, config: &MethodConfig) -> Result<UnlearnResult> {
    let retained = ctx.md.retained_set();
    if retained.is_empty() {
        return Err(Error::EmptySet("retained training set".into()));
    }
    let started = Instant::now();
    let model = train_model(&ctx.mo.arch, &retained, ctx.hyper, ctx.train_seed)?;
    let mut config = config.clone();
    config.steps = ctx.hyper.total_steps;
    Ok(UnlearnResult::new(model, started, config))
}

/// Continue optimizing M_o on the retained samples for a short fresh
/// schedule; forgetting of S_f is a side effect of it being absent.
pub fn catastrophic_forget(ctx: &UnlearnContext, config: &MethodConfig) -> Result<UnlearnResult> {
    let retained = ctx.md.retained_set();
    if retained.is_empty() {
        return Err(Error::EmptySet("retained training set".into()));
    }
    let started = Instant::now();
    if config.steps == 0 {
        return Ok(UnlearnResult::new(ctx.mo.clone(), started, config.clone()));
    }
    let hyper = SgdHyper {
        total_steps: config.steps,
        schedule: LrSchedule::WarmupLinearDecay,
        ..ctx.hyper.clone()
    };
    let model =
        continue_training(ctx.mo, &retained, &hyper, derive_seed(config.seed, "cf-batches"))?;
    Ok(UnlearnResult::new(model, started, config.clone()))
}

/// The two importance vectors dampening needs, computed once per
/// (model, forget set) and reusable across a hyperparameter grid.
pub struct SsdImportances {
    /// Importance over the full (manipulated) training set.
    pub train_imp: Vec<f64>,
    /// Importance over the identified forget set.
    pub forget_imp: Vec<f64>,
    /// Wall time spent estimating both vectors.
    pub seconds: f64,
}

pub fn ssd_importances(ctx: &UnlearnContext) -> Result<SsdImportances> {
    let forget = ctx.md.forget_set();
    if forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let started = Instant::now();
    let train_imp = fim_diag(ctx.mo, &ctx.md.data.train)?;
    let forget_imp = fim_diag(ctx.mo, &forget)?;
    Ok(SsdImportances { train_imp, forget_imp, seconds: started.elapsed().as_secs_f64() })
}

/// Dampen the weights whose forget-set importance dominates their
/// train-set importance: where f > α·d, scale by β = min(γ·d/f, 1).
/// Returns the modified model and the selected-coordinate count.
pub fn ssd_dampen(mo: &Model, imp: &SsdImportances, alpha: f64, gamma: f64) -> Result<(Model, usize)> {
    let (mut flat, _) = flatten_params(mo);
    if imp.train_imp.len() != flat.len() || imp.forget_imp.len() != flat.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("importance vectors of length {}", flat.len()),
            got: format!("{} / {}", imp.train_imp.len(), imp.forget_imp.len()),
        });
    }
    let mut selected = 0;
    for i in 0..flat.len() {
        let (d, f) = (imp.train_imp[i], imp.forget_imp[i]);
        if f > alpha * d {
            let beta = (gamma * d / f).min(1.0);
            flat[i] *= beta;
            selected += 1;
        }
    }
    Ok((unflatten_params(mo, &flat)?, selected))
}

/// Training-free dampening: estimate importances, then rescale the
/// dominated weights. No gradient step touches the model.
pub fn ssd_unlearn(ctx: &UnlearnContext, config: &MethodConfig) -> Result<UnlearnResult> {
    let started = Instant::now();
    let imp = ssd_importances(ctx)?;
    let (model, selected) = ssd_dampen(ctx.mo, &imp, config.ssd_alpha, config.ssd_gamma)?;
    let mut result = UnlearnResult::new(model, started, config.clone());
    result.diagnostics.insert("selected_weights".into(), selected as f64);
    Ok(result)
}

/// Run dampening against precomputed importances, pricing the result as
/// if the importances were estimated for it alone.
pub fn ssd_unlearn_with(
    ctx: &UnlearnContext,
    imp: &SsdImportances,
    config: &MethodConfig,
) -> Result<UnlearnResult> {
    let started = Instant::now();
    let (model, selected) = ssd_dampen(ctx.mo, &imp, config.ssd_alpha, config.ssd_gamma)?;
    let mut result = UnlearnResult::new(model, started, config.clone());
    result.wall_time_seconds += imp.seconds;
    result.diagnostics.insert("selected_weights".into(), selected as f64);
    Ok(result)
}

/// Distill a copy of M_o toward a randomly initialized teacher on the
/// forget set and toward M_o itself on the retained set, one batch of
/// each per step with the two gradients summed.
pub fn badt_unlearn(ctx: &UnlearnContext, config: &MethodConfig) -> Result<UnlearnResult> {
    let forget = ctx.md.forget_set();
    if forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let retained = ctx.md.retained_set();
    if retained.is_empty() {
        return Err(Error::EmptySet("retained training set".into()));
    }
    let started = Instant::now();
    if config.steps == 0 {
        return Ok(UnlearnResult::new(ctx.mo.clone(), started, config.clone()));
    }
    let random_teacher = build_model(&ctx.mo.arch, derive_seed(config.seed, "badt-teacher"))?;
    let mut student = ctx.mo.clone();
    let hyper = SgdHyper {
        total_steps: config.steps,
        schedule: LrSchedule::WarmupLinearDecay,
        ..ctx.hyper.clone()
    };
    let mut state = OptimState::new(hyper.clone(), &student.params)?;
    let mut forget_batches =
        BatchSampler::new(forget.len(), hyper.batch_size, derive_seed(config.seed, "badt-forget"))?;
    let mut retain_batches = BatchSampler::new(
        retained.len(),
        hyper.batch_size,
        derive_seed(config.seed, "badt-retain"),
    )?;
    for _ in 0..config.steps {
        let rows_f = forget_batches.next_batch().to_vec();
        let (xf, _) = forget.batch(&rows_f);
        let teacher_f = random_teacher.forward(&xf)?;
        let (_, grads_f) = forward_backward(
            &student,
            &xf,
            &[],
            &LossSpec::Distill { teacher_logits: &teacher_f, temperature: config.temperature },
        )?;
        let rows_r = retain_batches.next_batch().to_vec();
        let (xr, _) = retained.batch(&rows_r);
        let teacher_r = ctx.mo.forward(&xr)?;
        let (_, grads_r) = forward_backward(
            &student,
            &xr,
            &[],
            &LossSpec::Distill { teacher_logits: &teacher_r, temperature: config.temperature },
        )?;
        let summed: IndexMap<String, crate::tensor::Tensor> = grads_f
            .into_iter()
            .map(|(name, mut g)| {
                for (a, b) in g.data_mut().iter_mut().zip(grads_r[&name].data()) {
                    *a += b;
                }
                (name, g)
            })
            .collect();
        sgd_update(&mut student.params, &summed, &mut state)?;
    }
    Ok(UnlearnResult::new(student, started, config.clone()))
}

/// Alternate gradient ascent on the forget set (early steps only, with
/// the gradient norm clipped) against a preservation step that distills
/// from M_o and keeps the task loss low on retained data. Both phases
/// run at the dedicated small constant rate with their own momentum
/// state.
pub fn scrub_unlearn(ctx: &UnlearnContext, config: &MethodConfig) -> Result<UnlearnResult> {
    const ASCENT_CLIP: f64 = 5.0;
    let forget = ctx.md.forget_set();
    if forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let retained = ctx.md.retained_set();
    if retained.is_empty() {
        return Err(Error::EmptySet("retained training set".into()));
    }
    let started = Instant::now();
    if config.steps == 0 {
        return Ok(UnlearnResult::new(ctx.mo.clone(), started, config.clone()));
    }
    let mut student = ctx.mo.clone();
    let hyper = SgdHyper {
        learning_rate: config.scrub_lr,
        total_steps: config.steps,
        schedule: LrSchedule::Constant,
        ..ctx.hyper.clone()
    };
    let mut ascent_state = OptimState::new(hyper.clone(), &student.params)?;
    let mut preserve_state = OptimState::new(hyper.clone(), &student.params)?;
    let mut forget_batches =
        BatchSampler::new(forget.len(), hyper.batch_size, derive_seed(config.seed, "scrub-forget"))?;
    let mut retain_batches = BatchSampler::new(
        retained.len(),
        hyper.batch_size,
        derive_seed(config.seed, "scrub-retain"),
    )?;
    for t in 0..config.steps {
        if t < config.scrub_forget_steps {
            let rows = forget_batches.next_batch().to_vec();
            let (x, y) = forget.batch(&rows);
            let (_, mut grads) = forward_backward(&student, &x, &y, &LossSpec::NegCrossEntropy)?;
            clip_grad_norm(&mut grads, ASCENT_CLIP);
            sgd_update(&mut student.params, &grads, &mut ascent_state)?;
        }
        let rows = retain_batches.next_batch().to_vec();
        let (x, y) = retained.batch(&rows);
        let teacher_logits = ctx.mo.forward(&x)?;
        let (_, grads) = forward_backward(
            &student,
            &x,
            &y,
            &LossSpec::DistillPlusCe {
                teacher_logits: &teacher_logits,
                temperature: config.temperature,
                ce_weight: config.scrub_alpha,
            },
        )?;
        sgd_update(&mut student.params, &grads, &mut preserve_state)?;
    }
    Ok(UnlearnResult::new(student, started, config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        apply_badnet, generate_dataset, sample_forget_set, GenConfig, ManipulationSpec,
    };
    use crate::loss::cross_entropy;
    use crate::model::Arch;

    struct Fixture {
        md: ManipulatedDataset,
        mo: Model,
        hyper: SgdHyper,
        train_seed: u64,
    }

    fn fixture(with_forget: bool) -> Fixture {
        let gen = GenConfig {
            num_classes: 6,
            height: 8,
            width: 8,
            train: 120,
            val: 30,
            test: 30,
            ..GenConfig::default()
        };
        let data = generate_dataset(&gen, 41).unwrap();
        let mut md = apply_badnet(&data, &ManipulationSpec::poison(12, 42)).unwrap();
        if with_forget {
            md = sample_forget_set(&md, 0.5, 43).unwrap();
        }
        let hyper = SgdHyper { batch_size: 32, total_steps: 40, ..SgdHyper::default() };
        let arch = Arch::Mlp { input: 64, hidden: 16, num_classes: 6 };
        let train_seed = 44;
        let mo = train_model(&arch, &md.data.train, &hyper, train_seed).unwrap();
        Fixture { md, mo, hyper, train_seed }
    }

    fn ctx(f: &Fixture) -> UnlearnContext<'_> {
        UnlearnContext { mo: &f.mo, md: &f.md, hyper: &f.hyper, train_seed: f.train_seed }
    }

    #[test]
    fn exact_unlearn_with_empty_forget_set_reproduces_original() {
        let f = fixture(false);
        let result =
            exact_unlearn(&ctx(&f), &MethodConfig::new(Method::ExactUnlearning, 1)).unwrap();
        assert_eq!(result.model, f.mo);
    }

    #[test]
    fn exact_unlearn_drops_exactly_the_forget_rows() {
        let f = fixture(true);
        assert_eq!(f.md.forget_indices().len(), 6);
        assert_eq!(f.md.retained_set().len(), 120 - 6);
        let a = exact_unlearn(&ctx(&f), &MethodConfig::new(Method::ExactUnlearning, 1)).unwrap();
        let b = exact_unlearn(&ctx(&f), &MethodConfig::new(Method::ExactUnlearning, 2)).unwrap();
        // Retraining is deterministic in the original seed, not the
        // method seed.
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, f.mo);
    }

    #[test]
    fn zero_step_methods_return_the_original_model() {
        let f = fixture(true);
        for method in [Method::CatastrophicForgetting, Method::BadTeacher, Method::Scrub] {
            let config = MethodConfig {
                steps: 0,
                scrub_forget_steps: 0,
                ..MethodConfig::new(method, 7)
            };
            let result = run_method(&ctx(&f), &config).unwrap();
            assert_eq!(result.model, f.mo, "{method}");
        }
    }

    #[test]
    fn finetuning_reduces_retained_loss() {
        let f = fixture(true);
        let config = MethodConfig { steps: 60, ..MethodConfig::new(Method::CatastrophicForgetting, 3) };
        let result = catastrophic_forget(&ctx(&f), &config).unwrap();
        let retained = f.md.retained_set();
        let before = crate::train::mean_loss(&f.mo, &retained).unwrap();
        let after = crate::train::mean_loss(&result.model, &retained).unwrap();
        assert!(after <= before, "retained loss went {before} -> {after}");
    }

    #[test]
    fn ssd_empty_selection_is_identity() {
        let f = fixture(true);
        let config = MethodConfig {
            ssd_alpha: 1e18,
            ssd_gamma: 1.0,
            ..MethodConfig::new(Method::Ssd, 5)
        };
        let result = ssd_unlearn(&ctx(&f), &config).unwrap();
        assert_eq!(result.diagnostics["selected_weights"], 0.0);
        assert_eq!(result.model, f.mo);
    }

    #[test]
    fn ssd_huge_gamma_caps_beta_at_one() {
        let f = fixture(true);
        let c = ctx(&f);
        let imp = ssd_importances(&c).unwrap();
        let (low_alpha_model, selected) = ssd_dampen(&f.mo, &imp, 0.1, 1e18).unwrap();
        assert!(selected > 0);
        // β = min(γ·d/f, 1) = 1 everywhere: model unchanged.
        assert_eq!(low_alpha_model, f.mo);
    }

    #[test]
    fn ssd_dampening_arithmetic_and_untouched_complement() {
        let f = fixture(true);
        let p = f.mo.num_params();
        // Synthetic importances: coordinate 0 has f = 10·d, the rest
        // are never selected.
        let mut imp = SsdImportances { train_imp: vec![1.0; p], forget_imp: vec![0.0; p], seconds: 0.0 };
        imp.forget_imp[0] = 10.0;
        let (damped, selected) = ssd_dampen(&f.mo, &imp, 1.0, 1.0).unwrap();
        assert_eq!(selected, 1);
        let (orig_flat, _) = flatten_params(&f.mo);
        let (new_flat, _) = flatten_params(&damped);
        assert!((new_flat[0] - orig_flat[0] * 0.1).abs() < 1e-15);
        assert_eq!(&new_flat[1..], &orig_flat[1..]);
    }

    #[test]
    fn badt_changes_the_model_deterministically()  {
        let f = fixture(true);
        let config = MethodConfig { steps: 5, ..MethodConfig::new(Method::BadTeacher, 9) };
        let a = badt_unlearn(&ctx(&f), &config).unwrap();
        let b = badt_unlearn(&ctx(&f), &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, f.mo);
    }

    #[test]
    fn scrub_ascent_step_increases_forget_loss() {
        let f = fixture(true);
        // One ascent step, no preservation influence (alpha 0 still
        // distills; use 1 step with forget phase only by setting
        // steps = 1, forget_steps = 1 and a tiny rate, then measure on
        // the whole forget set).
        let config = MethodConfig {
            steps: 1,
            scrub_forget_steps: 1,
            scrub_lr: 1e-4,
            scrub_alpha: 0.0,
            ..MethodConfig::new(Method::Scrub, 11)
        };
        let result = scrub_unlearn(&ctx(&f), &config).unwrap();
        let forget = f.md.forget_set();
        let (x, y) = forget.all();
        let before = cross_entropy(&f.mo.forward(&x).unwrap(), &y).unwrap();
        let after = cross_entropy(&result.model.forward(&x).unwrap(), &y).unwrap();
        // The preservation step also ran; at this rate the ascent
        // dominates on the forget rows.
        assert!(after > before, "forget loss went {before} -> {after}");
    }

    #[test]
    fn scrub_rejects_forget_steps_beyond_schedule() {
        let f = fixture(true);
        let config = MethodConfig {
            steps: 10,
            scrub_forget_steps: 11,
            ..MethodConfig::new(Method::Scrub, 1)
        };
        assert!(run_method(&ctx(&f), &config).is_err());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
