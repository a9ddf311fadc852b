use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cars_core::dataset::{self, PreparedDataset};
use cars_core::experiment::{emit_convergence_trace, run_experiment, Policy, ScenarioConfig, RESULTS_FILE, TRACE_FILE};
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "cars", version, about = "Cache-aware recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid point and policy of a scenario and write results.csv.
    Run(RunArgs),
    /// Write the CARS convergence trace of the first grid point.
    Trace(TraceArgs),
    /// Turn a ratings CSV or a similarity triplet file into a pruned catalog.
    PrepDataset(PrepArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Session seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of norec,myopic,cars.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    #[arg(long, env = "CARS_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "CARS_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct PrepArgs {
    /// MovieLens ratings CSV (userId,movieId,rating,timestamp).
    #[arg(long, conflicts_with = "lastfm", required_unless_present = "lastfm")]
    movielens: Option<PathBuf>,
    /// Tab-separated similarity triplets (idA, idB, score).
    #[arg(long)]
    lastfm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Relatedness threshold; defaults to 0.6 for ratings and 0 for triplets.
    #[arg(long)]
    theta: Option<f64>,
    /// Recommendation list size used for pruning.
    #[arg(long, default_value_t = 4)]
    list_size: usize,
    /// Neighbors used by the collaborative-filtering fill.
    #[arg(long, default_value_t = dataset::DEFAULT_NEIGHBORS)]
    neighbors: usize,
}

/// Failure before any grid point ran (exit code 1).
struct ConfigError(anyhow::Error);

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            bail!("--threads must be >= 1");
        }
        b = b.num_threads(t);
    }
    Ok(b.build()?)
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(args: RunArgs) -> std::result::Result<usize, ConfigError> {
    let setup = || -> Result<(ScenarioConfig, rayon::ThreadPool)> {
        let mut cfg = load_config(&args.config)?;
        if let Some(out) = &args.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = args.seed {
            cfg.session.seed = seed;
        }
        if let Some(p) = &args.policies {
            cfg.policies = p.iter().map(|s| s.parse::<Policy>()).collect::<Result<_, _>>()?;
        }
        cfg.validate()?;
        Ok((cfg, thread_pool(args.threads)?))
    };
    let (cfg, pool) = setup().map_err(ConfigError)?;
    let report = pool.install(|| run_experiment(&cfg)).map_err(|e| ConfigError(e.into()))?;
    report
        .write(&cfg.output_dir)
        .with_context(|| format!("writing {}", cfg.output_dir.display()))
        .map_err(ConfigError)?;
    let failed = report.failed_rows();
    println!(
        "{} rows ({failed} with errors) written to {}",
        report.rows.len(),
        cfg.output_dir.join(RESULTS_FILE).display()
    );
    Ok(failed)
}

fn trace(args: TraceArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let out = args.out.unwrap_or_else(|| cfg.output_dir.clone());
    let r = thread_pool(args.threads)?.install(|| emit_convergence_trace(&cfg, &out))?;
    println!(
        "{} iterations (converged: {}), best cost {:.6} at iteration {}; trace in {}",
        r.iterations,
        r.converged,
        r.best_cost,
        r.best_index,
        out.join(TRACE_FILE).display()
    );
    if let Some(e) = r.error {
        log::warn!("stopped early: {e}");
    }
    Ok(())
}

fn prep(args: PrepArgs) -> Result<()> {
    let d: PreparedDataset = match (&args.movielens, &args.lastfm) {
        (Some(path), None) => dataset::prepare_movielens(
            path,
            args.theta.unwrap_or(dataset::DEFAULT_MOVIELENS_THRESHOLD),
            args.list_size,
            args.neighbors,
        )?,
        (None, Some(path)) => dataset::prepare_lastfm(path, args.theta.unwrap_or(0.0), args.list_size)?,
        _ => bail!("give exactly one of --movielens or --lastfm"),
    };
    d.save(&args.out)?;
    println!(
        "{} contents ({} before pruning, {} passes) written to {}",
        d.provenance.catalog_size,
        d.provenance.catalog_before_prune,
        d.provenance.prune_passes,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => match run(args) {
            Ok(0) => Ok(()),
            Ok(_) => return ExitCode::from(EXIT_PARTIAL),
            Err(ConfigError(e)) => Err(e),
        },
        Command::Trace(args) => trace(args),
        Command::PrepDataset(args) => prep(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
