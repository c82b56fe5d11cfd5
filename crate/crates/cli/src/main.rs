use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffsamp::config::{parse_override, parse_pairs, RunConfig, SchemeKind, DESK_ITERATIONS};
use diffsamp::metrics::{elbo, EvalResult};
use diffsamp::model::SamplerModel;
use diffsamp::trainer::{self, SweepRow, CONFIG_FILE};
use diffsamp::{targets, verify, Error};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "DIFFSAMP_OUT";

#[derive(Parser)]
#[command(name = "diffsamp", version, about = "Train and evaluate diffusion samplers for unnormalized densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sampler and write a run directory.
    Train(RunArgs),
    /// Estimate ELBO and importance-weighted ELBO of a checkpoint.
    Eval(EvalArgs),
    /// Train over discretization schemes and step counts; write a gap table.
    Sweep(SweepArgs),
    /// Run the numerical checks of continuous-time limits.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file in `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set n_train=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: `$DIFFSAMP_OUT/<name>` or `runs/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the short desk-scale iteration budget unless `iterations` is set explicitly.
    #[arg(long)]
    desk: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target name; defaults to the `target` of a config.txt next to the checkpoint.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long = "n-eval", default_value_t = 100)]
    n_eval: usize,
    #[arg(long, default_value_t = 2000)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated discretization schemes.
    #[arg(long, value_delimiter = ',', default_value = "uniform,random")]
    schemes: Vec<String>,
    /// Comma-separated training step counts.
    #[arg(long = "n-train", value_delimiter = ',', default_value = "5,10")]
    n_train: Vec<usize>,
    /// Comma-separated seeds averaged within each cell.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownTarget(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Sweep(a) => run_sweep(&a),
        Command::Verify(a) => run_verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verify) => ExitCode::from(3),
    }
}

/// File values, then the desk preset, then `--set` overrides.
fn resolve_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut pairs = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_pairs(&text)?
        }
        None => BTreeMap::new(),
    };
    let mut overrides = BTreeMap::new();
    for s in &args.overrides {
        let (k, v) = parse_override(s)?;
        overrides.insert(k, v);
    }
    if args.desk && !overrides.contains_key("iterations") {
        pairs.insert("iterations".into(), DESK_ITERATIONS.to_string());
    }
    pairs.extend(overrides);
    Ok(RunConfig::from_pairs(&pairs)?)
}

fn out_dir(args: &RunArgs, name: String) -> PathBuf {
    if let Some(dir) = &args.out {
        return dir.clone();
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

fn run_train(args: &RunArgs) -> Result<(), Failure> {
    let cfg = resolve_config(args)?;
    let dir = out_dir(args, format!("{}_{}_{}_seed{}", cfg.target, cfg.objective.name(), cfg.n_train, cfg.seed));
    eprintln!("writing run to {}", dir.display());
    println!("{}", trainer::METRICS_HEADER);
    let outcome = trainer::train_with(&cfg, Some(&dir), &mut |row| println!("{}", row.csv_row()))?;
    if outcome.skipped > 0 {
        eprintln!("skipped {} non-finite iterations", outcome.skipped);
    }
    Ok(())
}

fn target_from_run_dir(checkpoint: &Path) -> Result<RunConfig, Failure> {
    let cfg_path = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|_| {
        Failure::Usage(format!("no --target given and no {} next to the checkpoint", CONFIG_FILE))
    })?;
    Ok(RunConfig::parse(&text)?)
}

fn run_eval(args: &EvalArgs) -> Result<(), Failure> {
    let (name, dim) = match &args.target {
        Some(t) => (t.clone(), args.dim),
        None => {
            let cfg = target_from_run_dir(&args.checkpoint)?;
            (cfg.target, args.dim.or(cfg.dim))
        }
    };
    if args.k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    if args.n_eval == 0 {
        return Err(Failure::Usage("--n-eval must be at least 1".into()));
    }
    let target = targets::by_name(&name, dim).map_err(|e| match e {
        Error::InvalidArgument(msg) => Failure::Usage(msg),
        other => other.into(),
    })?;
    let (model, _) = SamplerModel::load(&args.checkpoint)?;
    if model.dim() != target.dim() {
        return Err(Failure::Usage(format!(
            "checkpoint has dimension {} but target `{name}` has dimension {}",
            model.dim(),
            target.dim()
        )));
    }
    let result = elbo(&model, target.as_ref(), args.n_eval, args.k, args.seed)?;
    println!("{}", EvalResult::CSV_HEADER);
    println!("{}", result.csv_row());
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.run)?;
    let schemes = args
        .schemes
        .iter()
        .map(|s| SchemeKind::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = out_dir(&args.run, format!("sweep_{}_{}", cfg.target, cfg.objective.name()));
    eprintln!("writing sweep to {}", dir.display());
    let rows = trainer::sweep(&cfg, &args.n_train, &schemes, &args.seeds, Some(&dir))?;
    println!("{}", SweepRow::CSV_HEADER);
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let results = verify::run_suite(args.seed)?;
    print!("{}", verify::format_table(&results));
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}
