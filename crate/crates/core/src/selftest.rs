//! Fast invariant checks runnable from the CLI. Each check builds its
//! own micro fixture and verifies a property the benchmark depends on;
//! the whole suite finishes in a few seconds.

use crate::data::{
    apply_badnet, generate_dataset, load_dataset, sample_forget_set, save_dataset, stamp_trigger,
    trigger_pixels, GenConfig, ManipulationSpec, SampleSet,
};
use crate::error::{Error, Result};
use crate::eval::{clean_label_accuracy, deletion_change, selection_score};
use crate::fisher::{fim_diag, fim_diag_bruteforce};
use crate::methods::{exact_unlearn, ssd_dampen, MethodConfig, Method, SsdImportances, UnlearnContext};
use crate::model::{
    build_model, flatten_params, load_checkpoint, save_checkpoint, unflatten_params, Arch,
};
use crate::optim::{lr_at_step, LrSchedule, OptimState, SgdHyper};
use crate::train::{finite_diff_grad, forward_backward, train_model, LossSpec};
use crate::Tensor;

#[derive(Clone, Debug)]
pub struct SelftestOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run every check; failures are collected, not propagated, so the
/// caller always gets the full list.
pub fn run_selftest() -> Vec<SelftestOutcome> {
    let checks: [(&'static str, fn() -> Result<String>); 10] = [
        ("autodiff_gradients", check_gradients),
        ("importance_estimate", check_importance),
        ("lr_schedule", check_schedule),
        ("parameter_flattening", check_flatten),
        ("checkpoint_roundtrip", check_checkpoint),
        ("dataset_generation", check_dataset),
        ("trigger_placement", check_trigger),
        ("exact_unlearning_identity", check_eu_identity),
        ("dampening_edge_cases", check_dampening),
        ("metric_exactness", check_metrics),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => SelftestOutcome { name, passed: true, detail },
            Err(e) => SelftestOutcome { name, passed: false, detail: e.to_string() },
        })
        .collect()
}

fn fail(name: &str, detail: String) -> Error {
    Error::InvalidConfig(format!("{name}: {detail}"))
}

fn pseudo_inputs(n: usize, shape: &[usize], scale: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut state = 0x2545f4914f6cdd1du64;
    let data: Vec<f64> = (0..n * numel)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            scale * ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        })
        .collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("fixture shape")
}

fn grads_close(
    got: &indexmap::IndexMap<String, Tensor>,
    want: &indexmap::IndexMap<String, Tensor>,
) -> Result<()> {
    for (name, g) in got {
        let w = &want[name];
        for (i, (a, b)) in g.data().iter().zip(w.data()).enumerate() {
            let denom = a.abs().max(b.abs());
            let rel = if denom > 0.0 { (a - b).abs() / denom } else { 0.0 };
            if (a - b).abs() > 1e-6 && rel > 1e-4 {
                return Err(fail(
                    "gradient mismatch",
                    format!("{name}[{i}]: analytic {a} vs numeric {b}"),
                ));
            }
        }
    }
    Ok(())
}

fn check_gradients() -> Result<String> {
    let mlp = build_model(&Arch::Mlp { input: 6, hidden: 5, num_classes: 3 }, 11)?;
    let x = pseudo_inputs(4, &[6], 2.0);
    let labels = [0usize, 2, 1, 0];
    let (_, analytic) = forward_backward(&mlp, &x, &labels, &LossSpec::CrossEntropy)?;
    let numeric = finite_diff_grad(&mlp, &x, &labels, &LossSpec::CrossEntropy, 1e-5)?;
    grads_close(&analytic, &numeric)?;

    let cnn = build_model(&Arch::Cnn { in_ch: 1, h: 4, w: 4, c1: 2, c2: 2, num_classes: 3 }, 12)?;
    let xc = pseudo_inputs(2, &[1, 4, 4], 2.0);
    let teacher = pseudo_inputs(2, &[3], 3.0);
    let spec =
        LossSpec::DistillPlusCe { teacher_logits: &teacher, temperature: 2.0, ce_weight: 0.3 };
    let (_, analytic) = forward_backward(&cnn, &xc, &[1, 2], &spec)?;
    let numeric = finite_diff_grad(&cnn, &xc, &[1, 2], &spec, 1e-5)?;
    grads_close(&analytic, &numeric)?;
    Ok("analytic gradients match central differences on dense and conv stacks".into())
}

fn check_importance() -> Result<String> {
    let model = build_model(&Arch::Mlp { input: 4, hidden: 3, num_classes: 3 }, 5)?;
    let x = pseudo_inputs(40, &[4], 2.0);
    let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
    let set = SampleSet::new(1, 1, 4, x.into_data(), labels)?;
    let fast = fim_diag(&model, &set)?;
    let slow = fim_diag_bruteforce(&model, &set)?;
    for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
        let denom = a.abs().max(b.abs());
        if denom > 0.0 && (a - b).abs() / denom > 1e-10 {
            return Err(fail("importance mismatch", format!("coordinate {i}: {a} vs {b}")));
        }
    }
    Ok("chunked importance estimate matches the per-sample reference".into())
}

fn check_schedule() -> Result<String> {
    let hyper = SgdHyper {
        learning_rate: 0.4,
        total_steps: 200,
        warmup_fraction: 0.1,
        schedule: LrSchedule::WarmupLinearDecay,
        ..SgdHyper::default()
    };
    let params =
        indexmap::IndexMap::from([(String::from("w"), Tensor::zeros(vec![1])) ]);
    let at = |step: usize| -> Result<f64> {
        let mut s = OptimState::new(hyper.clone(), &params)?;
        s.step = step;
        Ok(lr_at_step(&s))
    };
    let warmup = hyper.warmup_steps();
    if at(0)? != 0.0 || at(warmup)? != 0.4 || at(200)? != 0.0 {
        return Err(fail(
            "schedule endpoints",
            format!("lr(0)={} lr({warmup})={} lr(200)={}", at(0)?, at(warmup)?, at(200)?),
        ));
    }
    if at(warmup / 2)? >= at(warmup)? || at(150)? >= at(100)? {
        return Err(fail("schedule shape", "ramp or decay not monotone".into()));
    }
    let constant = SgdHyper { schedule: LrSchedule::Constant, ..hyper };
    let mut s = OptimState::new(constant, &params)?;
    s.step = 123;
    if lr_at_step(&s) != 0.4 {
        return Err(fail("constant schedule", format!("lr={}", lr_at_step(&s))));
    }
    Ok("warmup peak, linear decay to zero, constant schedule flat".into())
}

fn check_flatten() -> Result<String> {
    let model = build_model(&Arch::Cnn { in_ch: 1, h: 4, w: 4, c1: 2, c2: 3, num_classes: 4 }, 9)?;
    let (mut flat, index) = flatten_params(&model);
    if flat.len() != model.num_params() || index.total() != flat.len() {
        return Err(fail("flatten length", format!("{} vs {}", flat.len(), model.num_params())));
    }
    let back = unflatten_params(&model, &flat)?;
    for (name, p) in &model.params {
        if back.params[name].data() != p.data() {
            return Err(fail("roundtrip", format!("{name} changed")));
        }
    }
    let probe = flat.len() / 2;
    flat[probe] += 1.5;
    let bumped = unflatten_params(&model, &flat)?;
    let (name, offset) = index.locate(probe)?;
    let delta = bumped.params[name].data()[offset] - model.params[name].data()[offset];
    if (delta - 1.5).abs() > 1e-12 {
        return Err(fail("locate", format!("{name}[{offset}] moved by {delta}")));
    }
    Ok("flatten/unflatten is a bitwise roundtrip with a faithful index".into())
}

fn check_checkpoint() -> Result<String> {
    let model = build_model(&Arch::Mlp { input: 5, hidden: 4, num_classes: 3 }, 77)?;
    let path = std::env::temp_dir().join(format!("unlearn-selftest-{}.cmck", std::process::id()));
    save_checkpoint(&model, &path)?;
    let loaded = load_checkpoint(&path);
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    if loaded.arch != model.arch || loaded.seed != model.seed {
        return Err(fail("checkpoint header", "arch or seed changed".into()));
    }
    for (name, p) in &model.params {
        if loaded.params[name].data() != p.data() {
            return Err(fail("checkpoint params", format!("{name} changed")));
        }
    }
    Ok("checkpoint save/load preserves every parameter bit".into())
}

fn micro_gen() -> GenConfig {
    GenConfig {
        num_classes: 6,
        height: 8,
        width: 8,
        train: 120,
        val: 24,
        test: 24,
        ..GenConfig::default()
    }
}

fn check_dataset() -> Result<String> {
    let gen = micro_gen();
    let a = generate_dataset(&gen, 3)?;
    let b = generate_dataset(&gen, 3)?;
    if a.train.all().0.data() != b.train.all().0.data() || a.train.labels() != b.train.labels() {
        return Err(fail("generation determinism", "same seed, different data".into()));
    }
    for split in [&a.train, &a.val, &a.test] {
        for v in split.all().0.data() {
            if !(0.0..=gen.clamp_max).contains(v) {
                return Err(fail("value range", format!("{v} outside [0, {}]", gen.clamp_max)));
            }
        }
    }
    for c in 0..gen.num_classes {
        if a.train.indices_with_label(c).is_empty() {
            return Err(fail("class coverage", format!("class {c} missing from train")));
        }
    }
    Ok("generation is seed-deterministic, in range, and covers all classes".into())
}

fn check_trigger() -> Result<String> {
    let px = trigger_pixels(16, 16);
    if px != vec![(15, 15)] {
        return Err(fail("16x16 trigger", format!("{px:?}")));
    }
    let px32 = trigger_pixels(32, 32);
    if px32.len() != 4 || px32.iter().any(|&(y, x)| y < 16 || x < 16) {
        return Err(fail("32x32 trigger", format!("{px32:?}")));
    }
    let mut sample = vec![0.25; 64];
    stamp_trigger(&mut sample, 1, 8, 8, &trigger_pixels(8, 8));
    let stamped: Vec<usize> =
        (0..64).filter(|&i| sample[i] == 1.0).collect();
    if stamped != vec![63] {
        return Err(fail("stamp", format!("pixels {stamped:?} set")));
    }
    Ok("trigger occupies the bottom-right corner at full intensity".into())
}

fn check_eu_identity() -> Result<String> {
    let gen = micro_gen();
    let data = generate_dataset(&gen, 21)?;
    let md = apply_badnet(&data, &ManipulationSpec::poison(12, 22))?;
    let md = sample_forget_set(&md, 1.0, 23)?;
    let arch = Arch::Mlp { input: 64, hidden: 12, num_classes: 6 };
    let hyper = SgdHyper { batch_size: 32, total_steps: 40, ..SgdHyper::default() };
    let mo = train_model(&arch, &md.data.train, &hyper, 24)?;
    let ctx = UnlearnContext { mo: &mo, md: &md, hyper: &hyper, train_seed: 24 };
    let config = MethodConfig::new(Method::ExactUnlearning, 25);
    let eu = exact_unlearn(&ctx, &config)?;
    let reference = train_model(&arch, &md.retained_set(), &hyper, 24)?;
    for (name, p) in &reference.params {
        if eu.model.params[name].data() != p.data() {
            return Err(fail("identity", format!("{name} differs from retrained reference")));
        }
    }
    Ok("retraining-based unlearning reproduces the retrained model bitwise".into())
}

fn check_dampening() -> Result<String> {
    let model = build_model(&Arch::Mlp { input: 4, hidden: 3, num_classes: 2 }, 31)?;
    let p = model.num_params();
    let imp = SsdImportances {
        train_imp: vec![1.0; p],
        forget_imp: vec![2.0; p],
        seconds: 0.0,
    };
    // Selection threshold far above any ratio: nothing changes.
    let (noop, selected) = ssd_dampen(&model, &imp, 1e18, 1.0)?;
    if selected != 0 {
        return Err(fail("no-op selection", format!("{selected} parameters selected")));
    }
    for (name, p) in &model.params {
        if noop.params[name].data() != p.data() {
            return Err(fail("no-op identity", format!("{name} changed")));
        }
    }
    // Everything selected, but the ratio cap clamps the factor to one.
    let (capped, selected) = ssd_dampen(&model, &imp, 0.5, 1e18)?;
    if selected != p {
        return Err(fail("cap selection", format!("{selected} of {p} selected")));
    }
    for (name, p) in &model.params {
        if capped.params[name].data() != p.data() {
            return Err(fail("cap identity", format!("{name} changed")));
        }
    }
    // One coordinate made dominant: dampened by exactly gamma·d/f.
    let mut imp = imp;
    imp.forget_imp[0] = 10.0;
    let (one, selected) = ssd_dampen(&model, &imp, 2.0, 1.0)?;
    if selected != 1 {
        return Err(fail("single selection", format!("{selected} parameters selected")));
    }
    let (flat_before, index) = flatten_params(&model);
    let (flat_after, _) = flatten_params(&one);
    let expected = flat_before[0] * (1.0 / 10.0);
    if flat_after[0] != expected {
        return Err(fail("dampening factor", format!("{} vs {expected}", flat_after[0])));
    }
    if flat_after[1..] != flat_before[1..] {
        let _ = index;
        return Err(fail("dampening locality", "unselected coordinates moved".into()));
    }
    Ok("selection threshold, factor cap, and exact dampening all hold".into())
}

fn check_metrics() -> Result<String> {
    // Identity network: logits equal the (non-negative) inputs, so the
    // prediction is the argmax coordinate and metrics are exact.
    let arch = Arch::Mlp { input: 4, hidden: 4, num_classes: 4 };
    let mut model = build_model(&arch, 1)?;
    for (name, p) in model.params.iter_mut() {
        let d = p.data_mut();
        d.fill(0.0);
        if name.ends_with("weight") {
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
        }
    }
    let mut x = vec![0.0; 5 * 4];
    let hot = [0usize, 1, 2, 3, 0];
    for (i, &h) in hot.iter().enumerate() {
        x[i * 4 + h] = 1.0;
    }
    let labels = vec![0usize, 1, 2, 0, 0];
    let set = SampleSet::new(1, 1, 4, x, labels)?;
    let acc = clean_label_accuracy(&model, &set)?;
    if acc != 0.8 {
        return Err(fail("accuracy", format!("{acc} != 0.8")));
    }
    let dc = deletion_change(&model, &set)?;
    if dc != 0.2 {
        return Err(fail("deletion change", format!("{dc} != 0.2")));
    }
    let score = selection_score(dc, acc, 0.5)?;
    if score != 0.5 {
        return Err(fail("selection score", format!("{score} != 0.5")));
    }
    if selection_score(1.5, 0.5, 0.5).is_ok() {
        return Err(fail("range check", "out-of-range deletion change accepted".into()));
    }
    Ok("hand-computed accuracy, deletion change, and score reproduced exactly".into())
}

/// Dataset container and checkpoint round trips through real files,
/// exercised together because both hit the same byte-format code.
pub fn check_container_roundtrip() -> Result<String> {
    let gen = micro_gen();
    let data = generate_dataset(&gen, 41)?;
    let md = apply_badnet(&data, &ManipulationSpec::poison(10, 42))?;
    let md = sample_forget_set(&md, 0.5, 43)?;
    let path = std::env::temp_dir().join(format!("unlearn-selftest-{}.cmud", std::process::id()));
    save_dataset(&md, &path)?;
    let loaded = load_dataset(&path);
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    if loaded.data.train.all().0.data() != md.data.train.all().0.data()
        || loaded.data.train.labels() != md.data.train.labels()
        || loaded.forget_indices() != md.forget_indices()
        || loaded.spec != md.spec
    {
        return Err(fail("container", "loaded dataset differs".into()));
    }
    Ok("dataset container save/load preserves data, labels, and provenance".into())
}
