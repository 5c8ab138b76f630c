use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use oodkit::bundle::{read_bundle, FeatureBundle};
use oodkit::detectors::{fit, DetectorParams, DetectorState, Method, SplitPlan};
use oodkit::refmodel::{MlpModel, ModelAdapter};
use oodkit::runner::{
    aggregate, check_fixture, evaluate_state, load_records, read_classifier_f1, records_csv, render_report,
    run_benchmark, synth_benchmark, test_splits, write_atomic, BenchmarkConfig, Format, SynthSpec,
};
use oodkit::tuner::{tune, GridFile, PointOutcome};

#[derive(Parser)]
#[command(name = "oodkit", version, about = "Post-hoc out-of-distribution detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark bundle and its reference network.
    Synth {
        /// Strict JSON generator spec; defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search one detector on the validation splits and save the refit state.
    Tune {
        #[arg(long)]
        method: Method,
        /// JSON object mapping method tags to grids; a missing entry means defaults.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Saved reference network, for detectors that need model access.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Seed for stochastic detectors whose grid leaves it unset.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one detector at fixed parameters and save its state.
    Fit {
        #[arg(long)]
        method: Method,
        /// Parameters as an inline JSON object.
        #[arg(long, default_value = "{}")]
        params: String,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test splits with saved states and write per-split records.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated method tags; each state lives in `STATES/<tag>`.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
        #[arg(long)]
        states: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a records CSV into a method-by-benchmark table.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "md")]
        format: Format,
        /// CSV of per-benchmark classifier F1 scores to include.
        #[arg(long)]
        classifier_f1: Option<PathBuf>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute a published summary table from its per-dataset records.
    FixtureCheck {
        #[arg(long)]
        fixture: PathBuf,
        /// Expected table; defaults to `table1.csv` next to the fixture.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
    /// Run a full benchmark from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_model(path: Option<&Path>) -> Result<Option<MlpModel>> {
    path.map(|p| MlpModel::load(p).with_context(|| format!("loading network {}", p.display())))
        .transpose()
}

fn open(bundle: &Path) -> Result<FeatureBundle> {
    let b = read_bundle(bundle)?;
    b.validate_all()?;
    Ok(b)
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SynthSpec::from_json(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthSpec::default(),
    };
    synth_benchmark(&spec)?.write(out)?;
    println!("wrote {} ({} samples per split)", out.display(), spec.n);
    Ok(())
}

fn tune_cmd(method: Method, grid: &Path, bundle: &Path, model: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let bundle = open(bundle)?;
    let model = load_model(model)?;
    let adapter = model.as_ref().map(|m| m as &dyn ModelAdapter);
    let mut grid = GridFile::load(grid)?.grid(method)?;
    if let Some(seed) = seed.filter(|_| method.fields().contains(&"seed")) {
        for p in &mut grid.points {
            p.seed.get_or_insert(seed);
        }
    }
    let plan = SplitPlan::from_bundle(&bundle)?;
    let result = tune(&grid, &plan.context(&bundle, adapter))?;
    for point in &result.log {
        match &point.outcome {
            PointOutcome::Evaluated { auroc, aupr_h } => {
                println!("{}\tauroc={auroc:.6}\taupr_h={aupr_h:.6}", point.params.describe())
            }
            PointOutcome::Skipped(why) => println!("{}\tskipped: {why}", point.params.describe()),
        }
    }
    result.refit_state.save(out)?;
    println!("best {} (val AUROC {:.6}); state saved to {}", result.best_params.describe(), result.best_val_auroc, out.display());
    Ok(())
}

fn fit_cmd(method: Method, params: &str, bundle: &Path, model: Option<&Path>, out: &Path) -> Result<()> {
    let value: serde_json::Value = serde_json::from_str(params)
        .map_err(|e| oodkit::Error::InvalidParam(format!("--params is not JSON: {e}")))?;
    let params = DetectorParams::from_value(value)?;
    params.check_method(method)?;
    let bundle = open(bundle)?;
    let model = load_model(model)?;
    let adapter = model.as_ref().map(|m| m as &dyn ModelAdapter);
    let plan = SplitPlan::from_bundle(&bundle)?;
    fit(method, &params, &plan.context(&bundle, adapter))?.save(out)?;
    println!("{method} state saved to {}", out.display());
    Ok(())
}

fn eval(bundle: &Path, methods: &[Method], states: &Path, model: Option<&Path>, out: &Path) -> Result<()> {
    let bundle = open(bundle)?;
    let model = load_model(model)?;
    let adapter = model.as_ref().map(|m| m as &dyn ModelAdapter);
    let splits = test_splits(&bundle, &Default::default())?;
    let mut records = Vec::new();
    for &method in methods {
        let dir = states.join(method.tag());
        let state = DetectorState::load(&dir).with_context(|| format!("loading state {}", dir.display()))?;
        if state.method != method {
            bail!(oodkit::Error::Schema(format!("{} holds a {} state, not {method}", dir.display(), state.method)));
        }
        records.extend(evaluate_state(&bundle, &state, adapter, &splits)?);
    }
    write_atomic(out, records_csv(&records)?.as_bytes())?;
    println!("{} records written to {}", records.len(), out.display());
    Ok(())
}

fn report(records: &Path, format: Format, f1: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut table = aggregate(&load_records(records)?)?;
    if let Some(p) = f1 {
        let file = fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
        table = table.with_classifier_f1(read_classifier_f1(file)?);
    }
    let text = render_report(&table, format);
    match out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn fixture_check(fixture: &Path, table: Option<&Path>, tolerance: f64) -> Result<bool> {
    let table = table.map(Path::to_path_buf).unwrap_or_else(|| fixture.with_file_name("table1.csv"));
    let check = check_fixture(fixture, &table, tolerance)?;
    for cell in check.failures() {
        let computed = cell.computed.map_or("missing".to_string(), |v| format!("{v:.2}"));
        println!("mismatch {} {}: expected {:.2}, computed {computed}", cell.method, cell.column, cell.expected);
    }
    println!(
        "{} cells checked, {} outside ±{tolerance}, max deviation {:.4}",
        check.cells.len(),
        check.failures().len(),
        check.max_deviation()
    );
    Ok(check.passed())
}

fn run(config: &Path) -> Result<()> {
    let bytes = fs::read(config).with_context(|| format!("reading {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let cfg = BenchmarkConfig::from_json(&bytes, base)?;
    let out = run_benchmark(&cfg)?;
    print!("{}", render_report(&out.table, Format::Markdown));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out)?,
        Command::Tune { method, grid, bundle, model, seed, out } => {
            tune_cmd(method, &grid, &bundle, model.as_deref(), seed, &out)?
        }
        Command::Fit { method, params, bundle, model, out } => fit_cmd(method, &params, &bundle, model.as_deref(), &out)?,
        Command::Eval { bundle, methods, states, model, out } => eval(&bundle, &methods, &states, model.as_deref(), &out)?,
        Command::Report { records, format, classifier_f1, out } => {
            report(&records, format, classifier_f1.as_deref(), out.as_deref())?
        }
        Command::FixtureCheck { fixture, table, tolerance } => return fixture_check(&fixture, table.as_deref(), tolerance),
        Command::Run { config } => run(&config)?,
    }
    Ok(true)
}

/// 2 for malformed inputs, 3 for missing model capabilities, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<oodkit::Error>()) {
        Some(e) if e.is_capability() => 3,
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

/// The context chain down to the first toolkit error, whose message already
/// carries its own causes.
fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.is::<oodkit::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
