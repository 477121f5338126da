//! `unlearn`: run corrective-unlearning experiments, re-evaluate saved
//! checkpoints, aggregate results, and check invariants.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use unlearn_core::data::load_dataset;
use unlearn_core::eval::evaluate_run;
use unlearn_core::harness::{emit_summary, load_results, run_experiment, ExperimentConfig};
use unlearn_core::methods::Method;
use unlearn_core::model::load_checkpoint;
use unlearn_core::selftest::{check_container_roundtrip, run_selftest, SelftestOutcome};

#[derive(Parser)]
#[command(
    name = "unlearn",
    version,
    about = "Corrective unlearning benchmark: train on manipulated data, unlearn from a partial forget set, measure recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment described by a JSON config file.
    Run(RunArgs),
    /// Re-evaluate a saved model checkpoint against a saved dataset.
    Eval(EvalArgs),
    /// Aggregate a results file into per-(metric, manipulation) tables.
    Summarize(SummarizeArgs),
    /// Run the fast invariant suite and report each check.
    Selftest,
}

/// Flags override the config file; environment variables (same names
/// with the UNLEARN_ prefix) sit between the two.
#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; omitted fields take their defaults, and
    /// omitting the flag runs the default experiment.
    #[arg(long, env = "UNLEARN_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory for results.csv, grid.csv, and manifest.json.
    #[arg(long, env = "UNLEARN_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for grid points; 0 uses all cores.
    #[arg(long, env = "UNLEARN_WORKERS")]
    workers: Option<usize>,
    /// Master seed; every other seed derives from it.
    #[arg(long, env = "UNLEARN_SEED")]
    seed: Option<u64>,
    /// Comma-separated subset of EU, CF, SSD, BadT, SCRUB.
    #[arg(long, env = "UNLEARN_METHODS", value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated forget-set fractions in (0, 1].
    #[arg(long, env = "UNLEARN_FRACTIONS", value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset container the model is evaluated against.
    #[arg(long)]
    dataset: PathBuf,
    /// Weight on deletion change in the selection score.
    #[arg(long, default_value_t = 0.5)]
    selection_weight: f64,
}

#[derive(Args)]
struct SummarizeArgs {
    /// results.csv produced by `run`.
    #[arg(long, env = "UNLEARN_RESULTS")]
    results: PathBuf,
    /// Directory for the aggregate tables.
    #[arg(long, env = "UNLEARN_OUT", default_value = "summary")]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Summarize(args) => summarize(args),
        Command::Selftest => selftest(),
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(methods) = args.methods {
        config.methods = methods;
    }
    if let Some(fractions) = args.fractions {
        config.sf_fractions = fractions;
    }
    let store = run_experiment(&config).context("running experiment")?;
    println!(
        "wrote {} result rows and {} grid rows to {}",
        store.results.len(),
        store.grid_rows.len(),
        config.out_dir.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let md = load_dataset(&args.dataset)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let affected = unlearn_core::data::build_affected_sets(&md);
    let mut report = evaluate_run(&model, &md, &affected, args.selection_weight)?;
    report.method = "Eval".into();
    report.seed = model.seed;
    let manipulated = md.manipulated_indices().len();
    if manipulated > 0 {
        report.sf_fraction = md.forget_indices().len() as f64 / manipulated as f64;
    }
    let mut w = csv::WriterBuilder::new().from_writer(std::io::stdout());
    w.serialize(&report)?;
    w.flush()?;
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let reports = load_results(&args.results)
        .with_context(|| format!("loading {}", args.results.display()))?;
    let written = emit_summary(&reports, &args.out)?;
    println!("wrote {} tables to {}", written.len(), args.out.display());
    for path in written {
        println!("  {}", path.display());
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let mut outcomes = run_selftest();
    outcomes.push(match check_container_roundtrip() {
        Ok(detail) => SelftestOutcome { name: "container_roundtrip", passed: true, detail },
        Err(e) => SelftestOutcome { name: "container_roundtrip", passed: false, detail: e.to_string() },
    });
    let mut failed = 0usize;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", outcomes.len());
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}
