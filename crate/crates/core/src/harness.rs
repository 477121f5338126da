//! Experiment orchestration: configuration, forget-fraction sweeps,
//! hyperparameter grid search under the selection score, result
//! persistence, and timing.

use crate::data::{
    apply_badnet, apply_interclass_confusion, build_affected_sets, generate_dataset,
    sample_forget_set, AffectedDomainSets, Dataset, GenConfig, ManipKind, ManipulatedDataset,
    ManipulationSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, EvalReport};
use crate::fisher::fim_diag;
use crate::methods::{
    run_method, ssd_unlearn_with, Method, MethodConfig, SsdImportances, UnlearnContext,
    UnlearnResult,
};
use crate::model::{Arch, Model};
use crate::optim::SgdHyper;
use crate::seeds::{derive_seed, fnv1a};
use crate::train::train_model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One manipulation to benchmark: its kind and size as a fraction of
/// the train split (or an absolute override).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipSetting {
    pub kind: ManipKind,
    pub fraction: f64,
    #[serde(default)]
    pub n: Option<usize>,
}

impl ManipSetting {
    /// Manipulation size for a given train-split size; confusion sizes
    /// round to the nearest even count.
    pub fn size(&self, train_len: usize) -> usize {
        let raw = match self.n {
            Some(n) => n,
            None => (self.fraction * train_len as f64).round() as usize,
        };
        match self.kind {
            ManipKind::Poison => raw.max(1),
            ManipKind::InterclassConfusion => (((raw as f64) / 2.0).round() as usize * 2).max(2),
        }
    }
}

/// Hyperparameter grids searched per method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodGrids {
    pub ssd_alphas: Vec<f64>,
    /// Gamma is searched as these multiples of each alpha.
    pub ssd_gamma_factors: Vec<f64>,
    pub scrub_alphas: Vec<f64>,
}

impl Default for MethodGrids {
    fn default() -> Self {
        MethodGrids {
            ssd_alphas: vec![0.1, 1.0, 10.0, 50.0, 100.0, 500.0, 1000.0, 1e4, 1e5, 1e6],
            ssd_gamma_factors: vec![0.1, 0.5, 1.0, 5.0, 10.0],
            scrub_alphas: vec![0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0],
        }
    }
}

/// Per-method knobs that are fixed (not grid-searched).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodDefaults {
    pub steps: usize,
    pub scrub_forget_steps: usize,
    pub scrub_lr: f64,
    pub temperature: f64,
}

impl Default for MethodDefaults {
    fn default() -> Self {
        MethodDefaults { steps: 1000, scrub_forget_steps: 200, scrub_lr: 0.0025, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub arch: Arch,
    pub hyper: SgdHyper,
    pub manipulations: Vec<ManipSetting>,
    pub sf_fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub method_defaults: MethodDefaults,
    pub grids: MethodGrids,
    pub selection_weight: f64,
    pub repetitions: usize,
    pub master_seed: u64,
    /// Worker threads for grid points; 0 means all available cores.
    pub workers: usize,
    pub out_dir: PathBuf,
    /// Accepted for compatibility with restart-style schedules; the
    /// schedule here is plain warmup plus linear decay, so a value is
    /// ignored with a warning.
    pub t_mult: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gen: GenConfig::default(),
            arch: Arch::Cnn { in_ch: 1, h: 16, w: 16, c1: 8, c2: 16, num_classes: 10 },
            hyper: SgdHyper::default(),
            manipulations: vec![
                ManipSetting { kind: ManipKind::Poison, fraction: 0.01, n: None },
                ManipSetting { kind: ManipKind::InterclassConfusion, fraction: 0.02, n: None },
            ],
            sf_fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            methods: Method::ALL.to_vec(),
            method_defaults: MethodDefaults::default(),
            grids: MethodGrids::default(),
            selection_weight: 0.5,
            repetitions: 1,
            master_seed: 0,
            workers: 1,
            out_dir: PathBuf::from("results"),
            t_mult: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.arch.validate()?;
        self.hyper.validate()?;
        if let Arch::Cnn { in_ch, h, w, num_classes, .. } = self.arch {
            if in_ch != self.gen.channels
                || h != self.gen.height
                || w != self.gen.width
                || num_classes != self.gen.num_classes
            {
                return Err(Error::InvalidConfig(
                    "architecture input shape does not match the data generator".into(),
                ));
            }
        }
        if let Arch::Mlp { input, num_classes, .. } = self.arch {
            if input != self.gen.sample_numel() || num_classes != self.gen.num_classes {
                return Err(Error::InvalidConfig(
                    "architecture input shape does not match the data generator".into(),
                ));
            }
        }
        if self.manipulations.is_empty() {
            return Err(Error::InvalidConfig("no manipulations configured".into()));
        }
        if self.sf_fractions.is_empty()
            || self.sf_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(Error::InvalidConfig(
                "sf_fractions must be non-empty and lie in (0, 1]".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods configured".into()));
        }
        if !(0.0..=1.0).contains(&self.selection_weight) {
            return Err(Error::InvalidConfig("selection_weight must lie in [0,1]".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be positive".into()));
        }
        if self.grids.ssd_alphas.iter().chain(&self.grids.ssd_gamma_factors).any(|v| *v <= 0.0) {
            return Err(Error::InvalidConfig("ssd grid values must be positive".into()));
        }
        if self.grids.scrub_alphas.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidConfig("scrub grid values must be non-negative".into()));
        }
        if self.method_defaults.scrub_forget_steps > self.method_defaults.steps {
            return Err(Error::InvalidConfig(
                "scrub_forget_steps exceeds the unlearning step budget".into(),
            ));
        }
        Ok(())
    }

    /// Stable fingerprint of the full configuration.
    pub fn config_hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        Ok(format!("{:016x}", fnv1a(canonical.as_bytes())))
    }

    fn method_config(&self, method: Method, seed: u64) -> MethodConfig {
        let d = &self.method_defaults;
        MethodConfig {
            steps: d.steps,
            scrub_forget_steps: d.scrub_forget_steps,
            scrub_lr: d.scrub_lr,
            temperature: d.temperature,
            ..MethodConfig::new(method, seed)
        }
    }

    /// All grid points for a method, in deterministic order.
    pub fn grid_points(&self, method: Method, seed: u64) -> Vec<MethodConfig> {
        let base = self.method_config(method, seed);
        match method {
            Method::Ssd => {
                let mut out = Vec::new();
                for &alpha in &self.grids.ssd_alphas {
                    for &factor in &self.grids.ssd_gamma_factors {
                        out.push(MethodConfig {
                            ssd_alpha: alpha,
                            ssd_gamma: factor * alpha,
                            ..base.clone()
                        });
                    }
                }
                out
            }
            Method::Scrub => self
                .grids
                .scrub_alphas
                .iter()
                .map(|&alpha| MethodConfig { scrub_alpha: alpha, ..base.clone() })
                .collect(),
            _ => vec![base],
        }
    }
}

/// A grid row: the evaluation of one hyperparameter point, plus whether
/// the selection rule picked it.
#[derive(Clone, Debug)]
pub struct GridRow {
    pub report: EvalReport,
    pub selected: bool,
}

// Serialized flat (result columns plus `selected`) so the CSV writer
// sees a plain struct.
impl Serialize for GridRow {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let r = &self.report;
        let mut st = s.serialize_struct("GridRow", 15)?;
        st.serialize_field("method", &r.method)?;
        st.serialize_field("manipulation", &r.manipulation)?;
        st.serialize_field("n", &r.n)?;
        st.serialize_field("sf_fraction", &r.sf_fraction)?;
        st.serialize_field("repetition", &r.repetition)?;
        st.serialize_field("seed", &r.seed)?;
        st.serialize_field("acc_dm_test", &r.acc_dm_test)?;
        st.serialize_field("acc_sm_clean", &r.acc_sm_clean)?;
        st.serialize_field("acc_utility", &r.acc_utility)?;
        st.serialize_field("val_acc", &r.val_acc)?;
        st.serialize_field("deletion_change", &r.deletion_change)?;
        st.serialize_field("selection_score", &r.selection_score)?;
        st.serialize_field("wall_time_seconds", &r.wall_time_seconds)?;
        st.serialize_field("hyperparams_json", &r.hyperparams_json)?;
        st.serialize_field("selected", &self.selected)?;
        st.end()
    }
}

/// Accumulated results plus the artifacts written to the output
/// directory.
#[derive(Debug, Default)]
pub struct ResultStore {
    pub results: Vec<EvalReport>,
    pub grid_rows: Vec<GridRow>,
    pub manifest: serde_json::Value,
}

impl ResultStore {
    pub fn results_path(out_dir: &Path) -> PathBuf {
        out_dir.join("results.csv")
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let mut w = csv::Writer::from_path(Self::results_path(out_dir))?;
        for r in &self.results {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(out_dir.join("grid.csv"))?;
        for r in &self.grid_rows {
            w.serialize(r)?;
        }
        w.flush()?;
        std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Load result rows back from a results.csv.
pub fn load_results(path: &Path) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    let mut r = csv::Reader::from_path(path)?;
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Everything a grid search over one (model, forget set) needs.
pub struct RunContext<'a> {
    pub config: &'a ExperimentConfig,
    pub mo: &'a Model,
    pub md: &'a ManipulatedDataset,
    pub affected: &'a AffectedDomainSets,
    pub train_seed: u64,
    pub ssd_imp: Option<&'a SsdImportances>,
}

/// Run every grid point for a method, evaluate each, and pick the
/// winner by selection score; ties fall to higher utility accuracy,
/// then to the smallest hyperparameter key.
pub fn grid_search(
    method: Method,
    run: &RunContext,
    sf_fraction: f64,
    repetition: usize,
) -> Result<(EvalReport, Vec<GridRow>)> {
    let seed = derive_seed(
        run.config.master_seed,
        &format!("method/{method}/{}/{repetition}/{sf_fraction}", run.md.spec.kind),
    );
    let points = run.config.grid_points(method, seed);
    let ctx = UnlearnContext {
        mo: run.mo,
        md: run.md,
        hyper: &run.config.hyper,
        train_seed: run.train_seed,
    };
    let outcomes: Vec<Result<(MethodConfig, UnlearnResult, EvalReport)>> = points
        .par_iter()
        .map(|point| {
            let result = match (method, run.ssd_imp) {
                (Method::Ssd, Some(imp)) => ssd_unlearn_with(&ctx, imp, point)?,
                _ => run_method(&ctx, point)?,
            };
            let mut report =
                evaluate_run(&result.model, run.md, run.affected, run.config.selection_weight)?;
            report.method = method.to_string();
            report.sf_fraction = sf_fraction;
            report.repetition = repetition;
            report.seed = seed;
            report.wall_time_seconds = result.wall_time_seconds;
            report.hyperparams_json = point.hyperparams_json();
            Ok((point.clone(), result, report))
        })
        .collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (point, _result, report) = o?;
        rows.push((point, report));
    }
    let mut best = 0usize;
    for i in 1..rows.len() {
        let (a, b) = (&rows[i], &rows[best]);
        let better = a.1.selection_score > b.1.selection_score
            || (a.1.selection_score == b.1.selection_score
                && (a.1.acc_utility > b.1.acc_utility
                    || (a.1.acc_utility == b.1.acc_utility && a.0.grid_key() < b.0.grid_key())));
        if better {
            best = i;
        }
    }
    if rows.len() > 1 {
        for metric in ["acc_dm_test", "acc_sm_clean", "acc_utility", "val_acc", "deletion_change"] {
            let pick = |r: &EvalReport| match metric {
                "acc_dm_test" => r.acc_dm_test,
                "acc_sm_clean" => r.acc_sm_clean,
                "acc_utility" => r.acc_utility,
                "val_acc" => r.val_acc,
                _ => r.deletion_change,
            };
            if let Some(top) = rows
                .iter()
                .max_by(|a, b| pick(&a.1).partial_cmp(&pick(&b.1)).expect("finite metrics"))
            {
                log::info!(
                    "{method} grid best for {metric}: {} ({} = {:.4})",
                    top.1.hyperparams_json,
                    metric,
                    pick(&top.1)
                );
            }
        }
    }
    let best_report = rows[best].1.clone();
    let grid_rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, (_, report))| GridRow { report, selected: i == best })
        .collect();
    Ok((best_report, grid_rows))
}

fn apply_manipulation(data: &Dataset, setting: &ManipSetting, seed: u64) -> Result<ManipulatedDataset> {
    let n = setting.size(data.train.len());
    match setting.kind {
        ManipKind::Poison => apply_badnet(data, &ManipulationSpec::poison(n, seed)),
        ManipKind::InterclassConfusion => {
            apply_interclass_confusion(data, &ManipulationSpec::interclass_confusion(n, seed))
        }
    }
}

/// Execute the full experiment: per (manipulation, repetition) train the
/// original model once, record its baseline row, then sweep forget
/// fractions and methods with a grid search at every point.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultStore> {
    config.validate()?;
    if let Some(t) = config.t_mult {
        log::warn!("t_mult = {t} is accepted but ignored; the schedule is warmup plus linear decay");
    }
    std::fs::create_dir_all(&config.out_dir)?;
    probe_writable(&config.out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let started = Instant::now();
    let mut store = ResultStore::default();
    let mut run_seeds = Vec::new();
    for setting in &config.manipulations {
        for rep in 0..config.repetitions {
            let scope = format!("{}/{rep}", setting.kind);
            let data_seed = derive_seed(config.master_seed, &format!("data/{scope}"));
            let manip_seed = derive_seed(config.master_seed, &format!("manip/{scope}"));
            let train_seed = derive_seed(config.master_seed, &format!("train/{scope}"));
            run_seeds.push(serde_json::json!({
                "manipulation": setting.kind.to_string(),
                "repetition": rep,
                "data_seed": data_seed,
                "manip_seed": manip_seed,
                "train_seed": train_seed,
            }));
            let data = generate_dataset(&config.gen, data_seed)?;
            let md0 = apply_manipulation(&data, setting, manip_seed)?;
            log::info!(
                "training original model: {} n={} repetition {rep}",
                setting.kind,
                md0.spec.n
            );
            let mo = train_model(&config.arch, &md0.data.train, &config.hyper, train_seed)?;
            let affected = build_affected_sets(&md0);

            // Baseline row: the original model, evaluated as-is with
            // the fully identified manipulation set as its forget set.
            let md_full = sample_forget_set(
                &md0,
                1.0,
                derive_seed(config.master_seed, &format!("forget/{scope}/baseline")),
            )?;
            let mut baseline =
                evaluate_run(&mo, &md_full, &affected, config.selection_weight)?;
            baseline.method = "None".into();
            baseline.sf_fraction = 1.0;
            baseline.repetition = rep;
            baseline.seed = train_seed;
            store.results.push(baseline);

            // Train-set importance depends only on the original model;
            // estimate it once per model and reuse across fractions.
            let needs_ssd = config.methods.contains(&Method::Ssd);
            let (train_imp, train_imp_seconds) = if needs_ssd {
                let t = Instant::now();
                let imp = pool.install(|| fim_diag(&mo, &md0.data.train))?;
                (Some(imp), t.elapsed().as_secs_f64())
            } else {
                (None, 0.0)
            };

            for &fraction in &config.sf_fractions {
                let forget_seed =
                    derive_seed(config.master_seed, &format!("forget/{scope}/{fraction}"));
                let md = sample_forget_set(&md0, fraction, forget_seed)?;
                let ssd_imp = match &train_imp {
                    Some(d) => {
                        let t = Instant::now();
                        let forget_imp = pool.install(|| fim_diag(&mo, &md.forget_set()))?;
                        Some(SsdImportances {
                            train_imp: d.clone(),
                            forget_imp,
                            seconds: train_imp_seconds + t.elapsed().as_secs_f64(),
                        })
                    }
                    None => None,
                };
                for &method in &config.methods {
                    log::info!(
                        "{} n={} sf={fraction} repetition {rep}: {method}",
                        setting.kind,
                        md.spec.n
                    );
                    let run = RunContext {
                        config,
                        mo: &mo,
                        md: &md,
                        affected: &affected,
                        train_seed,
                        ssd_imp: ssd_imp.as_ref(),
                    };
                    let (best, rows) =
                        pool.install(|| grid_search(method, &run, fraction, rep))?;
                    store.results.push(best);
                    store.grid_rows.extend(rows);
                }
            }
        }
    }
    store.manifest = serde_json::json!({
        "config": config,
        "config_hash": config.config_hash()?,
        "code_version": env!("CARGO_PKG_VERSION"),
        "run_seeds": run_seeds,
        "total_wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    store.write(&config.out_dir)?;
    Ok(store)
}

fn probe_writable(dir: &Path) -> Result<()> {
    let probe = dir.join(".write_probe");
    std::fs::write(&probe, b"ok")?;
    std::fs::remove_file(&probe)?;
    Ok(())
}

/// Per-figure aggregate tables: one CSV per (metric, manipulation) with
/// forget fractions as rows and methods as columns, averaging over
/// repetitions. The baseline column is replicated across fractions.
pub fn emit_summary(reports: &[EvalReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::EmptySet("result store".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    const METRICS: [&str; 7] = [
        "acc_dm_test",
        "acc_sm_clean",
        "acc_utility",
        "val_acc",
        "deletion_change",
        "selection_score",
        "wall_time_seconds",
    ];
    let metric_of = |r: &EvalReport, name: &str| -> f64 {
        match name {
            "acc_dm_test" => r.acc_dm_test,
            "acc_sm_clean" => r.acc_sm_clean,
            "acc_utility" => r.acc_utility,
            "val_acc" => r.val_acc,
            "deletion_change" => r.deletion_change,
            "selection_score" => r.selection_score,
            _ => r.wall_time_seconds,
        }
    };
    let mut manipulations: Vec<String> = reports.iter().map(|r| r.manipulation.clone()).collect();
    manipulations.sort();
    manipulations.dedup();
    let canonical = ["None", "EU", "CF", "SSD", "BadT", "SCRUB"];
    let mut written = Vec::new();
    for manip in &manipulations {
        let rows: Vec<&EvalReport> =
            reports.iter().filter(|r| &r.manipulation == manip).collect();
        let methods: Vec<&str> = canonical
            .iter()
            .copied()
            .filter(|m| rows.iter().any(|r| r.method == *m))
            .collect();
        let mut fractions: Vec<f64> =
            rows.iter().filter(|r| r.method != "None").map(|r| r.sf_fraction).collect();
        if fractions.is_empty() {
            fractions = rows.iter().map(|r| r.sf_fraction).collect();
        }
        fractions.sort_by(|a, b| a.partial_cmp(b).expect("finite fractions"));
        fractions.dedup();
        for metric in METRICS {
            let path = out_dir.join(format!("summary_{metric}_{manip}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["sf_fraction".to_string()];
            header.extend(methods.iter().map(|m| m.to_string()));
            w.write_record(&header)?;
            for &fraction in &fractions {
                let mut record = vec![format!("{fraction}")];
                for &method in &methods {
                    let matching: Vec<f64> = rows
                        .iter()
                        .filter(|r| {
                            r.method == method
                                && (method == "None" || r.sf_fraction == fraction)
                        })
                        .map(|r| metric_of(r, metric))
                        .collect();
                    if matching.is_empty() {
                        record.push(String::new());
                    } else {
                        let mean = matching.iter().sum::<f64>() / matching.len() as f64;
                        record.push(format!("{mean}"));
                    }
                }
                w.write_record(&record)?;
            }
            w.flush()?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config(out_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            gen: GenConfig {
                num_classes: 6,
                height: 8,
                width: 8,
                train: 150,
                val: 30,
                test: 30,
                ..GenConfig::default()
            },
            arch: Arch::Mlp { input: 64, hidden: 16, num_classes: 6 },
            hyper: SgdHyper { batch_size: 32, total_steps: 30, ..SgdHyper::default() },
            manipulations: vec![ManipSetting { kind: ManipKind::Poison, fraction: 0.1, n: None }],
            sf_fractions: vec![0.5, 1.0],
            methods: vec![Method::ExactUnlearning, Method::Ssd],
            method_defaults: MethodDefaults { steps: 10, scrub_forget_steps: 5, ..MethodDefaults::default() },
            grids: MethodGrids {
                ssd_alphas: vec![1.0, 100.0],
                ssd_gamma_factors: vec![0.5, 5.0],
                scrub_alphas: vec![0.1],
            },
            out_dir,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn grid_points_counting() {
        let config = ExperimentConfig::default();
        assert_eq!(config.grid_points(Method::Ssd, 0).len(), 50);
        assert_eq!(config.grid_points(Method::Scrub, 0).len(), 8);
        assert_eq!(config.grid_points(Method::ExactUnlearning, 0).len(), 1);
        // Gamma is relative to alpha.
        let ssd = config.grid_points(Method::Ssd, 0);
        assert_eq!(ssd[0].ssd_alpha, 0.1);
        assert!((ssd[0].ssd_gamma - 0.01).abs() < 1e-12);
    }

    #[test]
    fn manip_sizes() {
        let poison = ManipSetting { kind: ManipKind::Poison, fraction: 0.01, n: None };
        assert_eq!(poison.size(5000), 50);
        let ic = ManipSetting { kind: ManipKind::InterclassConfusion, fraction: 0.02, n: None };
        assert_eq!(ic.size(5000), 100);
        // Odd requests round to even.
        let ic_odd = ManipSetting { kind: ManipKind::InterclassConfusion, fraction: 0.0, n: Some(7) };
        assert_eq!(ic_odd.size(5000), 8);
    }

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        assert_eq!(config.config_hash().unwrap(), config.config_hash().unwrap());
        let other = ExperimentConfig { master_seed: 1, ..ExperimentConfig::default() };
        assert_ne!(config.config_hash().unwrap(), other.config_hash().unwrap());
    }

    #[test]
    fn mismatched_arch_is_rejected_before_any_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = micro_config(dir.path().to_path_buf());
        config.arch = Arch::Mlp { input: 32, hidden: 16, num_classes: 6 };
        assert!(run_experiment(&config).is_err());
        assert!(!ResultStore::results_path(dir.path()).exists());
    }

    #[test]
    fn micro_experiment_row_counting_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(dir.path().join("a"));
        let store = run_experiment(&config).unwrap();
        // 1 manipulation × 1 repetition × (baseline + 2 fractions × 2 methods).
        assert_eq!(store.results.len(), 1 + 2 * 2);
        assert_eq!(store.results[0].method, "None");
        // Grid rows: per fraction, EU 1 + SSD 4.
        assert_eq!(store.grid_rows.len(), 2 * (1 + 4));
        assert_eq!(store.grid_rows.iter().filter(|r| r.selected).count(), 4);
        assert!(ResultStore::results_path(&config.out_dir).exists());

        let config_b = ExperimentConfig { out_dir: dir.path().join("b"), ..config.clone() };
        let store_b = run_experiment(&config_b).unwrap();
        for (a, b) in store.results.iter().zip(&store_b.results) {
            let (mut a, mut b) = (a.clone(), b.clone());
            a.wall_time_seconds = 0.0;
            b.wall_time_seconds = 0.0;
            assert_eq!(a, b);
        }
        // Round-trip through the CSV.
        let loaded = load_results(&ResultStore::results_path(&config.out_dir)).unwrap();
        assert_eq!(loaded.len(), store.results.len());
        assert_eq!(loaded[0].method, "None");
    }

    #[test]
    fn summary_tables_have_fraction_rows_and_method_columns() {
        let dir = tempfile::tempdir().unwrap();
        let config = micro_config(dir.path().join("run"));
        let store = run_experiment(&config).unwrap();
        let files = emit_summary(&store.results, &dir.path().join("summary")).unwrap();
        assert_eq!(files.len(), 7);
        let table = std::fs::read_to_string(
            dir.path().join("summary").join("summary_acc_dm_test_poison.csv"),
        )
        .unwrap();
        let mut lines = table.lines();
        assert_eq!(lines.next().unwrap(), "sf_fraction,None,EU,SSD");
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].starts_with("0.5,"));
        assert!(rows[1].starts_with("1,"));
        // Baseline column is replicated: same value in both rows.
        let first: Vec<&str> = rows[0].split(',').collect();
        let second: Vec<&str> = rows[1].split(',').collect();
        assert_eq!(first[1], second[1]);
        assert!(emit_summary(&[], dir.path()).is_err());
    }
}
