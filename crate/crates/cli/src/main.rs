use std::fs::{self, File};
use std::io::BufWriter;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csl::cluster::tcp;
use csl::estimators::{averaging_estimator, ilea, minimize_surrogate, IleaMode, SolverSettings};
use csl::experiment::datagen::{gen_logistic, gen_sparse_linear};
use csl::experiment::rng::{stream, Purpose};
use csl::experiment::{report, run_experiment, ExperimentConfig};
use csl::inference::{confidence_intervals, sigma_local};
use csl::{Cluster, DataShard, Error, Link, LossModel, SurrogateLoss, Transport};
use log::info;

#[derive(Parser)]
#[command(
    name = "csl",
    version,
    about = "Distributed estimation with surrogate likelihoods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Logistic,
    Linear,
    Poisson,
}

impl From<Family> for LossModel {
    fn from(f: Family) -> Self {
        match f {
            Family::Logistic => LossModel::Logistic,
            Family::Linear => LossModel::Linear,
            Family::Poisson => LossModel::Glm(Link::Poisson),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Design {
    Logistic,
    SparseLinear,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as one CSV per shard plus the true parameter.
    Gen {
        #[arg(long, value_enum, default_value = "logistic")]
        design: Design,
        #[arg(long, default_value_t = 2)]
        d: usize,
        /// Rows per shard.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Nonzeros in the sparse design.
        #[arg(long, default_value_t = 10)]
        s: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, env = "CSL_SEED", default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
    /// Run an experiment from a config file or preset and write the results CSV.
    Run {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named configuration, used when no config file is given.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Override a config key; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, env = "CSL_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize a results CSV into median/MAD tables.
    Report {
        results: PathBuf,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
    },
    /// Fit the surrogate estimator on shard files, optionally over TCP workers.
    Fit {
        #[arg(long, value_enum, default_value = "logistic")]
        model: Family,
        /// Shard CSV files; the first belongs to the center.
        #[arg(long, value_delimiter = ',', required = true)]
        shards: Vec<PathBuf>,
        /// Worker addresses for shards 2..k; in-process when omitted.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<String>,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Serve one shard over TCP for `fit`.
    Worker {
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        #[arg(long, value_enum, default_value = "logistic")]
        model: Family,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_)
    )
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if is_config_error(e) { EXIT_CONFIG } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            design,
            d,
            n,
            k,
            s,
            sigma,
            seed,
            out_dir,
        } => generate(design, d, n, k, s, sigma, seed, &out_dir).map(|_| ExitCode::SUCCESS),
        Command::Run {
            config,
            preset,
            overrides,
            trials,
            seed,
            output,
        } => run(config, preset, &overrides, trials, seed, output),
        Command::Report { results, out_dir } => {
            summarize(&results, &out_dir).map(|_| ExitCode::SUCCESS)
        }
        Command::Fit {
            model,
            shards,
            workers,
            rounds,
            level,
        } => fit(model.into(), &shards, workers, rounds, level).map(|_| ExitCode::SUCCESS),
        Command::Worker { listen, model } => {
            worker(&listen, model.into()).map(|_| ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(|e| fail(&e))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    design: Design,
    d: usize,
    n: usize,
    k: usize,
    s: usize,
    sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> csl::Result<()> {
    let mut rng = stream(seed, 1, Purpose::Data);
    let (shards, theta) = match design {
        Design::Logistic => {
            let (data, theta) = gen_logistic(&mut rng, d, n * k, false)?;
            (data.split_equal(k)?, theta)
        }
        Design::SparseLinear => gen_sparse_linear(&mut rng, d, n, k, s, sigma, false)?,
    };
    fs::create_dir_all(out_dir)?;
    for (j, shard) in shards.iter().enumerate() {
        shard.write_csv(BufWriter::new(File::create(
            out_dir.join(format!("shard_{}.csv", j + 1)),
        )?))?;
    }
    let truth: Vec<String> = theta.iter().map(|v| v.to_string()).collect();
    fs::write(out_dir.join("theta_star.csv"), truth.join("\n") + "\n")?;
    info!("wrote {k} shards of {n}x{d} to {}", out_dir.display());
    Ok(())
}

fn run(
    config: Option<PathBuf>,
    preset: Option<String>,
    overrides: &[String],
    trials: Option<usize>,
    seed: Option<u64>,
    output: Option<PathBuf>,
) -> csl::Result<ExitCode> {
    let mut cfg = match (config, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        (None, Some(name)) => ExperimentConfig::preset(&name)?,
        (None, None) => {
            return Err(Error::Config(
                "either --config or --preset is required".into(),
            ))
        }
    };
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = output {
        cfg.output = o;
    }
    cfg.validate()?;
    info!(
        "running {} with {} sweep points x {} trials -> {}",
        cfg.experiment,
        cfg.sweep_points().len(),
        cfg.trials,
        cfg.output.display()
    );
    let summary = run_experiment(&cfg)?;
    info!("{} rows from {} trials", summary.rows, summary.trials);
    if summary.failed_trials > 0 {
        eprintln!(
            "{} of {} trials had failures",
            summary.failed_trials, summary.trials
        );
        return Ok(ExitCode::from(EXIT_PARTIAL));
    }
    Ok(ExitCode::SUCCESS)
}

fn summarize(results: &Path, out_dir: &Path) -> csl::Result<()> {
    let written = report(results, out_dir)?;
    let text = fs::read_to_string(&written[0])?;
    print!("{text}");
    for p in &written {
        info!("wrote {}", p.display());
    }
    Ok(())
}

fn fit(
    model: LossModel,
    paths: &[PathBuf],
    workers: Vec<String>,
    rounds: usize,
    level: f64,
) -> csl::Result<()> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    let shards = paths
        .iter()
        .map(DataShard::read_csv_path)
        .collect::<csl::Result<Vec<_>>>()?;
    let transport = if workers.is_empty() {
        Transport::InProcess
    } else {
        Transport::Tcp(workers)
    };
    let mut cluster = Cluster::with_transport(model, shards, transport)?;
    let settings = SolverSettings::default();
    let start = averaging_estimator(&mut cluster, &settings)?;
    let traj = ilea(
        &mut cluster,
        &start,
        rounds - 1,
        IleaMode::ExactSurrogate,
        &settings,
        None,
    )?;
    let s = SurrogateLoss::build(&mut cluster, traj.last())?;
    let theta = minimize_surrogate(&s, traj.last(), &settings)?;
    let cov = sigma_local(&s, &theta)?;
    let ci = confidence_intervals(&theta, &cov, cluster.total_samples(), level)?;
    println!("coordinate,estimate,lower,upper");
    for i in 0..theta.len() {
        println!("{},{},{},{}", i + 1, theta[i], ci.lower[i], ci.upper[i]);
    }
    println!("# {}", cluster.comm_report());
    Ok(())
}

fn worker(listen: &str, model: LossModel) -> csl::Result<()> {
    let listener = TcpListener::bind(listen)?;
    info!("worker listening on {}", listener.local_addr()?);
    tcp::serve(listener, model)
}
