//! Experiment configuration: flat `key = value` text with `#` comments.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::estimators::SolverSettings;
use crate::highdim::L1Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentKind {
    /// Logistic regression, total sample size fixed, local size swept.
    MestSweepN,
    /// Logistic regression, local size fixed, machine count swept.
    MestSweepK,
    /// Confidence-interval coverage for logistic regression.
    Coverage,
    /// Sparse linear regression, total sample size fixed.
    LassoFixedN,
    /// Sparse linear regression, local size fixed.
    LassoFixedn,
    /// Surrogate versus full posterior.
    Bayes,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::MestSweepN,
        ExperimentKind::MestSweepK,
        ExperimentKind::Coverage,
        ExperimentKind::LassoFixedN,
        ExperimentKind::LassoFixedn,
        ExperimentKind::Bayes,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::MestSweepN => "mest_sweep_N",
            ExperimentKind::MestSweepK => "mest_sweep_k",
            ExperimentKind::Coverage => "coverage",
            ExperimentKind::LassoFixedN => "lasso_fixed_N",
            ExperimentKind::LassoFixedn => "lasso_fixed_n",
            ExperimentKind::Bayes => "bayes",
        }
    }

    /// Whether the sweep holds the total sample size fixed.
    pub fn fixed_total(self) -> bool {
        matches!(
            self,
            ExperimentKind::MestSweepN | ExperimentKind::LassoFixedN
        )
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    Flat,
    /// Independent N(0, sd²) on every coordinate.
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub d: usize,
    /// Local sample sizes.
    pub n: Vec<usize>,
    /// Machine counts; ignored when `total` fixes them.
    pub k: Vec<usize>,
    /// Total sample size for fixed-N sweeps.
    pub total: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// ILEA rounds (M-estimation, coverage) or surrogate lasso rounds.
    pub csl_rounds: usize,
    pub level: f64,
    pub sparsity: usize,
    pub sigma: f64,
    /// `c` in `λ = c·σ̂·sqrt(ln d / m)`, with `m = n` for single-machine fits
    /// and `m = N` for the pooled fit and later surrogate rounds.
    pub lambda_multiplier: f64,
    /// `c` for the first surrogate round, whose anchor is only the local fit.
    pub csl_lambda_multiplier: f64,
    pub solver: SolverSettings,
    pub l1: L1Settings,
    pub mcmc_iters: usize,
    pub proposal_scale: Option<f64>,
    pub bins: usize,
    pub prior: PriorSpec,
    /// Where to write per-trial chains, if anywhere.
    pub chain_dir: Option<PathBuf>,
}

pub const PRESETS: [&str; 10] = [
    "fig1-N",
    "fig1-k",
    "fig2-local",
    "fig2-cross",
    "fig4",
    "fig5",
    "fig6",
    "fig6-trend",
    "fig1-N-paper",
    "fig2-paper",
];

fn pow2(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|e| 1usize << e).collect()
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        let mut c = Self {
            experiment,
            d: 2,
            n: vec![64],
            k: vec![4],
            total: None,
            trials: 1,
            seed: 1,
            output: PathBuf::from("results.csv"),
            csl_rounds: 3,
            level: 0.95,
            sparsity: 10,
            sigma: 1.0,
            lambda_multiplier: 2.0,
            csl_lambda_multiplier: 3.0,
            solver: SolverSettings::default(),
            l1: L1Settings::default(),
            mcmc_iters: 20_000,
            proposal_scale: None,
            bins: 60,
            prior: PriorSpec::Flat,
            chain_dir: None,
        };
        match experiment {
            ExperimentKind::Coverage => c.csl_rounds = 2,
            ExperimentKind::LassoFixedN | ExperimentKind::LassoFixedn => {
                c.csl_rounds = 2;
                c.l1.tol = 1e-7;
                c.d = 100;
                c.n = vec![100];
            }
            _ => {}
        }
        if experiment.fixed_total() {
            c.total = Some(256);
        }
        c
    }

    /// Named configurations. Desk-scale unless the name ends in `-paper`.
    pub fn preset(name: &str) -> Result<Self> {
        use ExperimentKind::*;
        let c = match name {
            "fig1-N" => Self {
                d: 10,
                n: pow2(7, 13),
                total: Some(1 << 16),
                trials: 20,
                ..Self::new(MestSweepN)
            },
            "fig1-N-paper" => Self {
                d: 10,
                n: pow2(7, 13),
                total: Some(1 << 19),
                trials: 100,
                ..Self::new(MestSweepN)
            },
            "fig1-k" => Self {
                d: 10,
                n: vec![256],
                k: vec![16, 64, 256],
                trials: 20,
                ..Self::new(MestSweepK)
            },
            "fig2-local" => Self {
                d: 5,
                n: vec![2048],
                k: vec![16],
                trials: 200,
                ..Self::new(Coverage)
            },
            "fig2-cross" => Self {
                d: 5,
                n: vec![2048],
                k: vec![64],
                trials: 200,
                ..Self::new(Coverage)
            },
            "fig2-paper" => Self {
                d: 10,
                n: vec![2048],
                k: vec![16, 64, 256],
                trials: 100,
                ..Self::new(Coverage)
            },
            "fig4" => Self {
                d: 1000,
                n: vec![400, 800, 1600, 3200, 6400],
                total: Some(6400),
                sparsity: 10,
                trials: 10,
                ..Self::new(LassoFixedN)
            },
            "fig5" => Self {
                d: 1000,
                n: vec![400],
                k: vec![1, 2, 4, 8, 16],
                sparsity: 10,
                trials: 10,
                ..Self::new(LassoFixedn)
            },
            "fig6" => Self {
                d: 2,
                n: vec![256],
                k: vec![16],
                trials: 10,
                ..Self::new(Bayes)
            },
            "fig6-trend" => Self {
                d: 2,
                n: vec![64, 256, 1024],
                k: vec![16],
                trials: 10,
                ..Self::new(Bayes)
            },
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        Ok(Self {
            output: PathBuf::from(format!("{name}.csv")),
            ..c
        })
    }

    /// Parses config text. A `preset` or `experiment` key (whichever comes
    /// first) sets the starting point; later keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg: Option<Self> = None;
        for (line, key, value) in &pairs {
            let fail = |e: Error| Error::Config(format!("line {line}: {e}"));
            match (key.as_str(), cfg.as_mut()) {
                ("preset", None) => cfg = Some(Self::preset(value).map_err(fail)?),
                ("experiment", None) => cfg = Some(Self::new(value.parse().map_err(fail)?)),
                ("preset", Some(_)) => {
                    return Err(Error::Config(format!(
                        "line {line}: preset must come first"
                    )))
                }
                (_, None) => {
                    return Err(Error::Config(format!(
                        "line {line}: '{key}' before any 'experiment' or 'preset' key"
                    )))
                }
                (_, Some(c)) => c.set(key, value).map_err(fail)?,
            }
        }
        let cfg =
            cfg.ok_or_else(|| Error::Config("missing 'experiment' or 'preset' key".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Used for config files and command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("'{key}' expects a number, got '{v}'")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "experiment" => {
                let kind: ExperimentKind = value.parse()?;
                if kind != self.experiment {
                    *self = Self {
                        experiment: kind,
                        total: if kind.fixed_total() {
                            self.total.or(Some(256))
                        } else {
                            None
                        },
                        ..self.clone()
                    };
                }
            }
            "d" => self.d = num(key, value)?,
            "n" => self.n = list(key, value)?,
            "k" => self.k = list(key, value)?,
            "N" | "total" => self.total = Some(num(key, value)?),
            "trials" => self.trials = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "output" => self.output = PathBuf::from(value),
            "csl_rounds" => self.csl_rounds = num(key, value)?,
            "level" => self.level = num(key, value)?,
            "s" | "sparsity" => self.sparsity = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "lambda_multiplier" => self.lambda_multiplier = num(key, value)?,
            "csl_lambda_multiplier" => self.csl_lambda_multiplier = num(key, value)?,
            "grad_tol" => self.solver.grad_tol = num(key, value)?,
            "max_iters" => self.solver.max_iters = num(key, value)?,
            "l1_tol" => self.l1.tol = num(key, value)?,
            "l1_max_iters" => self.l1.max_iters = num(key, value)?,
            "mcmc_iters" => self.mcmc_iters = num(key, value)?,
            "proposal_scale" => self.proposal_scale = Some(num(key, value)?),
            "bins" => self.bins = num(key, value)?,
            "prior" => {
                self.prior = match value.split_whitespace().collect::<Vec<_>>().as_slice() {
                    ["flat"] => PriorSpec::Flat,
                    ["gaussian", sd] => PriorSpec::Gaussian(num(key, sd)?),
                    _ => {
                        return Err(Error::Config(format!(
                            "prior must be 'flat' or 'gaussian <sd>', got '{value}'"
                        )))
                    }
                }
            }
            "chain_dir" => self.chain_dir = Some(PathBuf::from(value)),
            "preset" => return Err(Error::Config("preset cannot be overridden".into())),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.n.is_empty() || self.n.contains(&0) {
            return bad("n must list positive values".into());
        }
        if !self.experiment.fixed_total() && (self.k.is_empty() || self.k.contains(&0)) {
            return bad("k must list positive values".into());
        }
        if self.experiment.fixed_total() {
            let total = match self.total {
                Some(t) if t > 0 => t,
                _ => return bad("N must be positive for a fixed-N sweep".into()),
            };
            if let Some(n) = self.n.iter().find(|n| total % **n != 0) {
                return bad(format!("N = {total} is not a multiple of n = {n}"));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must lie in (0, 1), got {}", self.level));
        }
        if !(self.sigma > 0.0)
            || !(self.lambda_multiplier > 0.0)
            || !(self.csl_lambda_multiplier > 0.0)
        {
            return bad("sigma and the lambda multipliers must be positive".into());
        }
        if matches!(
            self.experiment,
            ExperimentKind::LassoFixedN | ExperimentKind::LassoFixedn
        ) && self.sparsity > self.d
        {
            return bad(format!("sparsity {} exceeds d = {}", self.sparsity, self.d));
        }
        if matches!(self.experiment, ExperimentKind::Bayes)
            && (self.mcmc_iters < 2 || self.bins < 10)
        {
            return bad("bayes needs mcmc_iters >= 2 and bins >= 10".into());
        }
        if let Some(s) = self.proposal_scale {
            if !(s > 0.0) {
                return bad("proposal_scale must be positive".into());
            }
        }
        if let PriorSpec::Gaussian(sd) = self.prior {
            if !(sd > 0.0) {
                return bad("prior sd must be positive".into());
            }
        }
        if self.csl_rounds == 0 {
            return bad("csl_rounds must be at least 1".into());
        }
        self.solver
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.l1
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// `(n, k)` for every sweep point, in run order.
    pub fn sweep_points(&self) -> Vec<(usize, usize)> {
        match self.total {
            Some(total) if self.experiment.fixed_total() => {
                self.n.iter().map(|&n| (n, total / n)).collect()
            }
            _ => self
                .n
                .iter()
                .flat_map(|&n| self.k.iter().map(move |&k| (n, k)))
                .collect(),
        }
    }
}

/// `(line, key, value)` triples from `key = value` text.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key or value".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}
