//! Command-line front end: `gen`, `train`, `eval`, `ablate` and
//! `check-sinkhorn`.
//!
//! Exit status is 0 on success, 2 for usage and configuration errors and 1
//! for failures while running. Errors are reported as a single line on
//! stderr.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use rand::Rng;

use crate::config::{parse_kv, ExperimentConfig};
use crate::cost::{CostConfig, CostKind};
use crate::data::{load_csv, make_longtailed_split, save_csv, stream, SplitTag};
use crate::error::{Error, Result};
use crate::eval::report::eval_csv;
use crate::eval::{confusion_and_metrics, run_ablation, run_experiment, write_ablation_outputs, write_run_outputs};
use crate::model::{forward, load_checkpoint};
use crate::ot::{finite_diff_grad, grad_ot_wrt_source, max_relative_error, sinkhorn_plan, Marginal, SinkhornConfig};
use crate::reweight::toy::{maintained_vs_scratch_gap, ToyBatch};

#[derive(Debug, Parser)]
#[command(name = "otrw", version, about = "Optimal-transport example re-weighting for imbalanced data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate long-tailed train/meta/test CSVs and a manifest.
    Gen(GenArgs),
    /// Two-stage training over one or more seeds.
    Train(TrainArgs),
    /// Evaluate a saved model checkpoint on a dataset CSV.
    Eval(EvalArgs),
    /// Run the cost kind x meta distribution ablation grid.
    Ablate(AblateArgs),
    /// Solve a random transport problem and check the solver.
    CheckSinkhorn(CheckArgs),
}

#[derive(Debug, Args)]
struct Shared {
    /// Key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n_head: Option<usize>,
    /// Imbalance factor (largest over smallest class size).
    #[arg(long = "if")]
    imbalance_factor: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    meta_per_class: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// ce, proportion, ot_direct or ot_weightnet.
    #[arg(long)]
    method: Option<String>,
    /// label, feature or combined.
    #[arg(long)]
    cost: Option<String>,
    /// prototype, whole or random_sample.
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    /// Directory holding train.csv, test.csv and optionally meta.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the weights of every training example after each epoch.
    #[arg(long)]
    dump_weights: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV (`label,f0,...`).
    #[arg(long)]
    data: PathBuf,
    /// Class count; defaults to the model's output width.
    #[arg(long)]
    classes: Option<usize>,
    /// Seed recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `eval.csv`; printed to stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 6)]
    cols: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the plan as `row,col,mass` CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("{}", line.trim());
            return 2;
        }
    };
    let result = match cli.command {
        Command::Gen(args) => gen(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::CheckSinkhorn(args) => check_sinkhorn(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing file {}", path.display())))
    }
}

/// Config file entries, then `--set` overrides, then the given flag values.
fn entries(shared: &Shared, flags: &[(&str, Option<String>)]) -> Result<BTreeMap<String, String>> {
    let mut map = match &shared.config {
        Some(path) => {
            require_file(path)?;
            parse_kv(&fs::read_to_string(path)?)?
        }
        None => BTreeMap::new(),
    };
    for item in &shared.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{item}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(seed) = shared.seed {
        map.insert("seed".into(), seed.to_string());
    }
    for (key, value) in flags {
        if let Some(v) = value {
            map.insert((*key).to_string(), v.clone());
        }
    }
    Ok(map)
}

fn gen(args: GenArgs) -> Result<()> {
    let map = entries(
        &args.shared,
        &[
            ("data.classes", args.classes.map(|v| v.to_string())),
            ("data.n_head", args.n_head.map(|v| v.to_string())),
            ("data.imbalance_factor", args.imbalance_factor.map(|v| v.to_string())),
            ("data.dim", args.dim.map(|v| v.to_string())),
            ("data.separation", args.separation.map(|v| v.to_string())),
            ("data.test_per_class", args.test_per_class.map(|v| v.to_string())),
            ("data.meta_per_class", args.meta_per_class.map(|v| v.to_string())),
        ],
    )?;
    let cfg = ExperimentConfig::from_entries(&map)?;
    let mut spec = cfg.data.clone();
    spec.seed = cfg.seed;
    let (train, meta, test) = make_longtailed_split(&spec, cfg.meta_per_class)?;
    fs::create_dir_all(&args.out)?;
    save_csv(&train, &args.out.join("train.csv"))?;
    save_csv(&meta, &args.out.join("meta.csv"))?;
    save_csv(&test, &args.out.join("test.csv"))?;
    let manifest = serde_json::json!({
        "spec": spec,
        "meta_per_class": cfg.meta_per_class,
        "train_class_counts": train.class_counts,
        "meta_class_counts": meta.class_counts,
        "test_class_counts": test.class_counts,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    fs::write(args.out.join("manifest.json"), text + "\n")?;
    println!(
        "wrote {} train, {} meta, {} test examples to {}",
        train.len(),
        meta.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    if let Some(dir) = &args.data {
        require_file(&dir.join("train.csv"))?;
        require_file(&dir.join("test.csv"))?;
    }
    let map = entries(
        &args.shared,
        &[
            ("method", args.method.clone()),
            ("cost.kind", args.cost.clone()),
            ("q.mode", args.q.clone()),
            ("runs", args.runs.map(|v| v.to_string())),
            ("data.dir", args.data.as_ref().map(|d| d.display().to_string())),
            ("dump_weights", args.dump_weights.then(|| "true".to_string())),
        ],
    )?;
    let cfg = ExperimentConfig::from_entries(&map)?;
    log::info!("resolved config:\n{}", cfg.to_kv());
    let runs = run_experiment(&cfg)?;
    write_run_outputs(&cfg, &runs, &args.out)?;
    for run in &runs {
        println!(
            "seed {}: balanced accuracy {:.4} -> {:.4}, min recall {:.4} -> {:.4}",
            run.seed,
            run.stage1.balanced_accuracy,
            run.stage2.balanced_accuracy,
            run.stage1.min_recall(),
            run.stage2.min_recall()
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    require_file(&args.model)?;
    require_file(&args.data)?;
    let model = load_checkpoint(&args.model)?;
    let k = args.classes.unwrap_or_else(|| model.num_classes());
    if k != model.num_classes() {
        return Err(Error::Config(format!(
            "--classes {k} does not match the model's {} outputs",
            model.num_classes()
        )));
    }
    let data = load_csv(&args.data, Some(k), SplitTag::Test)?;
    let preds = forward(&model, &data.features)?.predictions();
    let mut report = confusion_and_metrics(&preds, &data.labels, k)?;
    report.seed = args.seed;
    let csv = eval_csv(&report);
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("eval.csv"), &csv)?;
            println!(
                "balanced accuracy {:.4}, top-1 error {:.4}; wrote {}",
                report.balanced_accuracy,
                report.top1_error,
                dir.join("eval.csv").display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let map = entries(&args.shared, &[("runs", args.runs.map(|v| v.to_string()))])?;
    let base = ExperimentConfig::from_entries(&map)?;
    let cells = run_ablation(&base)?;
    let toy = ToyBatch::long_tail(base.seed)?;
    let label = CostConfig {
        kind: CostKind::Label,
        label_coeff: base.cost.label_coeff,
    };
    let gap = maintained_vs_scratch_gap(&toy, &label, &base.sinkhorn, 1.0, 500, 2)?;
    write_ablation_outputs(&base, &cells, Some(gap), &args.out)?;
    println!(
        "{} cells, toy maintained-vs-scratch gap {gap:.3e}; wrote {}",
        cells.len(),
        args.out.display()
    );
    Ok(())
}

/// Random cost in [0, 1) and random strictly positive marginals.
pub fn random_problem(rows: usize, cols: usize, seed: u64) -> Result<(Array2<f64>, Marginal, Marginal)> {
    if rows == 0 || cols == 0 {
        return Err(Error::Config("--rows and --cols must be positive".into()));
    }
    let mut rng = stream(seed, 0);
    let cost = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>());
    let mut mass = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.5..1.5)).collect() };
    let a = Marginal::from_unnormalized(&mass(rows))?;
    let b = Marginal::from_unnormalized(&mass(cols))?;
    Ok((cost, a, b))
}

fn check_sinkhorn(args: CheckArgs) -> Result<()> {
    let cfg = SinkhornConfig::new(args.lambda, args.max_iter, 1e-9).map_err(|e| Error::Config(e.to_string()))?;
    let (cost, a, b) = random_problem(args.rows, args.cols, args.seed)?;
    let plan = sinkhorn_plan(&cost, &a, &b, &cfg)?;
    println!(
        "sinkhorn: {}x{} lambda {} iterations {} converged {} marginal violation {:.3e}",
        args.rows, args.cols, args.lambda, plan.iterations, plan.converged, plan.marginal_violation
    );
    let tight = SinkhornConfig::new(args.lambda, 100_000, 1e-13)?;
    let analytic: Array1<f64> = grad_ot_wrt_source(&cost, &a, &b, &tight)?.gradient;
    let numeric = finite_diff_grad(&cost, &a, &b, &tight, 1e-6)?;
    println!("gradient check: max relative error {:.3e}", max_relative_error(&analytic, &numeric));
    if let Some(path) = &args.dump {
        let mut out = String::from("row,col,mass\n");
        for ((i, j), m) in plan.plan.indexed_iter() {
            writeln!(out, "{i},{j},{m}").unwrap();
        }
        fs::write(path, out)?;
    }
    Ok(())
}
