//! Runs an experiment configuration and writes the results CSV.
//!
//! Rows are written trial by trial in sweep order, and each trial's rows are
//! flushed before the next trial starts. Wall-clock runtimes go to a sidecar
//! file so the results file itself is a pure function of the configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;

use super::config::{ExperimentConfig, ExperimentKind, PriorSpec};
use super::datagen::{gen_logistic, gen_sparse_linear};
use super::rng::{splitmix64, stream, stream_seed, Purpose};
use crate::bayes::{
    coupled_metropolis, full_log_posterior, marginal_l1, run_csl_bayes, surrogate_log_posterior,
    AnchorSettings, McmcSettings, Prior,
};
use crate::cluster::{Cluster, CommLedger};
use crate::error::{Error, Result};
use crate::estimators::{
    averaging_estimator, global_estimator, ilea, minimize_surrogate, IleaMode,
};
use crate::highdim::{
    averaging_lasso, global_lasso, iterative_csl_lasso, lambda_for, scaled_lasso, LambdaSchedule,
    ScaledLasso, SparseEstimate,
};
use crate::inference::{confidence_intervals, sigma_cross, sigma_local, CovarianceEstimate};
use crate::model::LossModel;
use crate::surrogate::SurrogateLoss;

pub const RESULTS_HEADER: [&str; 8] = [
    "experiment",
    "d",
    "n",
    "k",
    "trial",
    "estimator",
    "metric",
    "value",
];

pub const ERROR_FLAG: &str = "error_flag";

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub experiment: ExperimentKind,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    /// 1-based.
    pub trial: usize,
    pub estimator: String,
    pub metric: String,
    pub value: f64,
}

impl ResultsRow {
    pub fn fields(&self) -> [String; 8] {
        [
            self.experiment.label().to_string(),
            self.d.to_string(),
            self.n.to_string(),
            self.k.to_string(),
            self.trial.to_string(),
            self.estimator.clone(),
            self.metric.clone(),
            self.value.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub rows: usize,
    pub trials: usize,
    /// Trials with at least one flagged failure.
    pub failed_trials: usize,
}

/// Path of the runtime sidecar for a results file.
pub fn runtime_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".runtime.csv");
    PathBuf::from(s)
}

/// Runs `cfg`, writing `cfg.output` and its runtime sidecar.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    if let Some(dir) = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let results = BufWriter::new(File::create(&cfg.output)?);
    let runtimes = BufWriter::new(File::create(runtime_path(&cfg.output))?);
    run_experiment_to(cfg, results, Some(runtimes))
}

/// Runs `cfg`, writing results (and optionally runtimes) to the given sinks.
pub fn run_experiment_to<W: Write, R: Write>(
    cfg: &ExperimentConfig,
    results: W,
    runtimes: Option<R>,
) -> Result<RunSummary> {
    cfg.validate()?;
    if let Some(dir) = &cfg.chain_dir {
        fs::create_dir_all(dir)?;
    }
    let mut out = csv::Writer::from_writer(results);
    out.write_record(RESULTS_HEADER)?;
    out.flush()?;
    let mut rt = runtimes.map(csv::Writer::from_writer);
    if let Some(w) = rt.as_mut() {
        w.write_record(RESULTS_HEADER)?;
    }
    let mut summary = RunSummary::default();
    for (n, k) in cfg.sweep_points() {
        for trial in 1..=cfg.trials {
            let t = run_trial(cfg, n, k, trial);
            for row in &t.rows {
                out.write_record(row.fields())?;
            }
            out.flush()?;
            if let Some(w) = rt.as_mut() {
                for row in &t.runtimes {
                    w.write_record(row.fields())?;
                }
                w.flush()?;
            }
            summary.rows += t.rows.len();
            summary.trials += 1;
            summary.failed_trials += usize::from(t.failed);
        }
    }
    Ok(summary)
}

/// Master seed of one sweep point. It depends on `n` only, so sweeps over
/// `k` at fixed `n` draw nested datasets.
fn point_seed(master: u64, n: usize) -> u64 {
    splitmix64(master ^ splitmix64(n as u64))
}

struct Trial<'a> {
    cfg: &'a ExperimentConfig,
    n: usize,
    k: usize,
    trial: usize,
    rows: Vec<ResultsRow>,
    runtimes: Vec<ResultsRow>,
    failed: bool,
}

impl Trial<'_> {
    fn row(&self, estimator: &str, metric: &str, value: f64) -> ResultsRow {
        ResultsRow {
            experiment: self.cfg.experiment,
            d: self.cfg.d,
            n: self.n,
            k: self.k,
            trial: self.trial,
            estimator: estimator.to_string(),
            metric: metric.to_string(),
            value,
        }
    }

    fn push(&mut self, estimator: &str, metric: &str, value: f64) {
        if value.is_finite() {
            self.rows.push(self.row(estimator, metric, value));
        } else {
            self.fail(estimator, &Error::NonFinite("metric value"));
        }
    }

    fn fail(&mut self, estimator: &str, err: &Error) {
        log::warn!(
            "{} n={} k={} trial {}: {estimator} failed: {err}",
            self.cfg.experiment,
            self.n,
            self.k,
            self.trial
        );
        self.rows.push(self.row(estimator, ERROR_FLAG, 1.0));
        self.failed = true;
    }

    /// Runs `f`, records its wall-clock time, and flags a failure.
    fn timed<T>(&mut self, estimator: &str, f: impl FnOnce() -> Result<T>) -> Option<T> {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        self.runtimes.push(self.row(estimator, "runtime_s", secs));
        match out {
            Ok(v) => Some(v),
            Err(e) => {
                self.fail(estimator, &e);
                None
            }
        }
    }

    fn push_ledger(&mut self, estimator: &str, ledger: &CommLedger) {
        self.push(estimator, "vectors_sent", ledger.vectors_sent as f64);
        self.push(estimator, "rounds", ledger.rounds as f64);
    }
}

fn run_trial(cfg: &ExperimentConfig, n: usize, k: usize, trial: usize) -> Trial<'_> {
    let mut t = Trial {
        cfg,
        n,
        k,
        trial,
        rows: Vec::new(),
        runtimes: Vec::new(),
        failed: false,
    };
    let seed = point_seed(cfg.seed, n);
    let result = match cfg.experiment {
        ExperimentKind::MestSweepN | ExperimentKind::MestSweepK => mest_trial(&mut t, seed),
        ExperimentKind::Coverage => coverage_trial(&mut t, seed),
        ExperimentKind::LassoFixedN | ExperimentKind::LassoFixedn => lasso_trial(&mut t, seed),
        ExperimentKind::Bayes => bayes_trial(&mut t, seed),
    };
    if let Err(e) = result {
        t.fail("data", &e);
    }
    t
}

fn sq_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn logistic_cluster(t: &Trial<'_>, seed: u64) -> Result<(Cluster, DVector<f64>)> {
    let mut rng = stream(seed, t.trial as u64, Purpose::Data);
    let (data, theta_star) = gen_logistic(&mut rng, t.cfg.d, t.n * t.k, false)?;
    Ok((
        Cluster::from_dataset(LossModel::Logistic, &data, t.k)?,
        theta_star,
    ))
}

/// Global, averaging, and 1..T-step surrogate estimators started from the
/// averaging estimator.
fn mest_trial(t: &mut Trial<'_>, seed: u64) -> Result<()> {
    let (mut cluster, theta_star) = logistic_cluster(t, seed)?;
    let solver = t.cfg.solver;
    let rounds = t.cfg.csl_rounds;

    let before = cluster.comm_report();
    if let Some(g) = t.timed("global", || global_estimator(&mut cluster, &solver)) {
        t.push("global", "sq_error", sq_error(&g, &theta_star));
        let ledger = cluster.comm_report().since(&before);
        t.push("global", "samples_pooled", ledger.samples_pooled as f64);
    }

    let before = cluster.comm_report();
    let Some(avg) = t.timed("averaging", || averaging_estimator(&mut cluster, &solver)) else {
        for s in 1..=rounds {
            t.fail(
                &format!("csl_{s}"),
                &Error::InvalidArgument("no averaging initializer".into()),
            );
        }
        return Ok(());
    };
    let avg_ledger = cluster.comm_report().since(&before);
    t.push("averaging", "sq_error", sq_error(&avg, &theta_star));
    t.push_ledger("averaging", &avg_ledger);

    let traj = t.timed("csl", || {
        ilea(
            &mut cluster,
            &avg,
            rounds,
            IleaMode::ExactSurrogate,
            &solver,
            None,
        )
    });
    match traj {
        Some(traj) => {
            let per_round = traj.ledger_after.since(&traj.ledger_before);
            for s in 1..=rounds {
                let label = format!("csl_{s}");
                t.push(&label, "sq_error", sq_error(&traj.iterates[s], &theta_star));
                let ledger = CommLedger {
                    vectors_sent: avg_ledger.vectors_sent
                        + per_round.vectors_sent * s as u64 / rounds as u64,
                    scalars_sent: avg_ledger.scalars_sent,
                    rounds: avg_ledger.rounds + s as u64,
                    samples_pooled: 0,
                };
                t.push_ledger(&label, &ledger);
            }
        }
        None => {
            for s in 1..=rounds {
                t.fail(
                    &format!("csl_{s}"),
                    &Error::InvalidArgument("ILEA failed".into()),
                );
            }
        }
    }
    Ok(())
}

/// Surrogate estimator with intervals from the host-only and cross-machine
/// covariance plug-ins; coverage is recorded for the first coordinate.
fn coverage_trial(t: &mut Trial<'_>, seed: u64) -> Result<()> {
    let (mut cluster, theta_star) = logistic_cluster(t, seed)?;
    let solver = t.cfg.solver;
    let rounds = t.cfg.csl_rounds;
    let level = t.cfg.level;
    let total = cluster.total_samples();

    let before = cluster.comm_report();
    let fitted = t.timed("csl", || {
        let avg = averaging_estimator(&mut cluster, &solver)?;
        let traj = ilea(
            &mut cluster,
            &avg,
            rounds - 1,
            IleaMode::ExactSurrogate,
            &solver,
            None,
        )?;
        let s = SurrogateLoss::build(&mut cluster, traj.last())?;
        let theta = minimize_surrogate(&s, traj.last(), &solver)?;
        Ok((s, theta))
    });
    let Some((s, theta)) = fitted else {
        t.fail(
            "csl_local",
            &Error::InvalidArgument("no surrogate estimate".into()),
        );
        t.fail(
            "csl_cross",
            &Error::InvalidArgument("no surrogate estimate".into()),
        );
        return Ok(());
    };
    t.push("csl", "sq_error", sq_error(&theta, &theta_star));
    t.push_ledger("csl", &cluster.comm_report().since(&before));

    let record = |t: &mut Trial<'_>, label: &str, cov: Option<CovarianceEstimate>| {
        let Some(cov) = cov else { return };
        match confidence_intervals(&theta, &cov, total, level) {
            Ok(ci) => {
                t.push(
                    label,
                    "covered",
                    f64::from(u8::from(ci.contains(0, theta_star[0]))),
                );
                t.push(label, "half_width", ci.half_width(0));
                t.push(label, "few_machines", f64::from(u8::from(cov.few_machines)));
            }
            Err(e) => t.fail(label, &e),
        }
    };
    let local = t.timed("csl_local", || sigma_local(&s, &theta));
    record(t, "csl_local", local);
    let cross = t.timed("csl_cross", || sigma_cross(&s, &mut cluster, &theta));
    record(t, "csl_cross", cross);
    Ok(())
}

/// Local lasso (the anchor), averaged lasso, surrogate lasso rounds, and
/// the pooled lasso.
fn lasso_trial(t: &mut Trial<'_>, seed: u64) -> Result<()> {
    let cfg = t.cfg;
    let mut rng = stream(seed, t.trial as u64, Purpose::Data);
    let (shards, theta_star) =
        gen_sparse_linear(&mut rng, cfg.d, t.n, t.k, cfg.sparsity, cfg.sigma, false)?;
    let mut cluster = Cluster::new(LossModel::Linear, shards)?;
    let l1 = cfg.l1;
    let push_est = |t: &mut Trial<'_>, label: &str, e: &SparseEstimate| {
        t.push(label, "sq_error", sq_error(&e.theta, &theta_star));
        t.push(label, "support_size", e.support.len() as f64);
        t.push(label, "converged", f64::from(u8::from(e.converged)));
    };

    let host = cluster.shard(0).clone();
    let Some(ScaledLasso {
        estimate: local,
        lambda: lambda_local,
        sigma_hat,
    }) = t.timed("local", || {
        scaled_lasso(LossModel::Linear, &host, cfg.lambda_multiplier, &cfg.l1)
    })
    else {
        return Ok(());
    };
    push_est(t, "local", &local);
    let big_n = cluster.total_samples();
    let lambda_first = lambda_for(sigma_hat, cfg.d, big_n, cfg.csl_lambda_multiplier);
    let lambda_global = lambda_for(sigma_hat, cfg.d, big_n, cfg.lambda_multiplier);
    t.push("local", "lambda", lambda_local);
    t.push("global", "lambda", lambda_global);

    let before = cluster.comm_report();
    if let Some(avg) = t.timed("averaging", || {
        averaging_lasso(&mut cluster, lambda_local, &l1)
    }) {
        push_est(t, "averaging", &avg);
        t.push_ledger("averaging", &cluster.comm_report().since(&before));
    }

    let before = cluster.comm_report();
    let schedule = LambdaSchedule::List(
        (0..cfg.csl_rounds)
            .map(|r| if r == 0 { lambda_first } else { lambda_global })
            .collect(),
    );
    let traj = t.timed("csl", || {
        iterative_csl_lasso(&mut cluster, &local.theta, &schedule, cfg.csl_rounds, &l1)
    });
    if let Some(traj) = traj {
        let spent = cluster.comm_report().since(&before);
        for (s, e) in traj.iter().enumerate() {
            let label = format!("csl_{}", s + 1);
            push_est(t, &label, e);
            t.push(&label, "lambda", schedule.at(s)?);
            let share = (s + 1) as u64;
            let ledger = CommLedger {
                vectors_sent: spent.vectors_sent * share / cfg.csl_rounds as u64,
                scalars_sent: 0,
                rounds: share,
                samples_pooled: 0,
            };
            t.push_ledger(&label, &ledger);
        }
    }

    if let Some(g) = t.timed("global", || global_lasso(&mut cluster, lambda_global, &l1)) {
        push_est(t, "global", &g);
    }
    Ok(())
}

/// Surrogate posterior chain against a full-posterior chain coupled to it,
/// compared through per-coordinate marginal distances.
fn bayes_trial(t: &mut Trial<'_>, seed: u64) -> Result<()> {
    let cfg = t.cfg;
    let (mut cluster, theta_star) = logistic_cluster(t, seed)?;
    let d = cfg.d;
    let prior = match cfg.prior {
        PriorSpec::Flat => Prior::Flat,
        PriorSpec::Gaussian(sd) => {
            Prior::gaussian(DVector::zeros(d), DVector::from_element(d, sd))?
        }
    };
    let anchor = AnchorSettings {
        rounds: cfg.csl_rounds,
        solver: cfg.solver,
        ..Default::default()
    };
    let mcmc = McmcSettings {
        iters: cfg.mcmc_iters,
        proposal_scale: cfg.proposal_scale,
        seed: stream_seed(seed, t.trial as u64, Purpose::Mcmc),
    };
    let Some(run) = t.timed("csl_bayes", || {
        run_csl_bayes(&mut cluster, &prior, &anchor, &mcmc)
    }) else {
        return Ok(());
    };
    t.push("csl_bayes", "acceptance_rate", run.chain.acceptance_rate());
    t.push(
        "csl_bayes",
        "anchor_sq_error",
        sq_error(&run.anchor, &theta_star),
    );
    t.push_ledger("csl_bayes", &run.ledger);

    let pooled = cluster.pool()?;
    let total = pooled.n();
    let coupled = t.timed("full_posterior", || {
        coupled_metropolis(
            |th| surrogate_log_posterior(&run.surrogate, &prior, th, total),
            |th| full_log_posterior(LossModel::Logistic, &pooled, &prior, th),
            &run.anchor,
            run.chain.proposal_scale,
            cfg.mcmc_iters,
            mcmc.seed,
        )
    });
    let full = coupled.map(|(_, full)| full);
    let Some(full) = full else { return Ok(()) };
    t.push("full_posterior", "acceptance_rate", full.acceptance_rate());
    for j in 0..d {
        match marginal_l1(&run.chain, &full, j, cfg.bins) {
            Ok(v) => t.push("csl_bayes", &format!("marginal_l1_{}", j + 1), v),
            Err(e) => t.fail("csl_bayes", &e),
        }
    }
    if let Some(dir) = &cfg.chain_dir {
        for (label, chain) in [("surrogate", &run.chain), ("full", &full)] {
            let path = dir.join(format!(
                "bayes_n{}_k{}_trial{}_{label}.csv",
                t.n, t.k, t.trial
            ));
            chain.write_csv(BufWriter::new(File::create(path)?))?;
        }
    }
    Ok(())
}
