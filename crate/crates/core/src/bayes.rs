//! Communication-efficient posterior sampling: build a surrogate loss at a
//! cheap anchor, then run random-walk Metropolis on `exp(−N·L̃(θ))·π(θ)`
//! entirely on the center machine.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cluster::{Cluster, CommLedger};
use crate::error::{Error, Result};
use crate::estimators::{ilea, IleaMode, Initializer, Smooth, SolverSettings};
use crate::model::{DataShard, LossModel};
use crate::surrogate::SurrogateLoss;

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Flat,
    /// Independent normals with per-coordinate means and standard deviations.
    Gaussian {
        mean: DVector<f64>,
        stddev: DVector<f64>,
    },
    /// Uniform on the box `[lower, upper]`.
    UniformBox {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
}

impl Prior {
    pub fn gaussian(mean: DVector<f64>, stddev: DVector<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: stddev.len(),
            });
        }
        if stddev.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "prior stddevs must be positive and finite".into(),
            ));
        }
        Ok(Prior::Gaussian { mean, stddev })
    }

    pub fn uniform_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidArgument(
                "box requires lower < upper in every coordinate".into(),
            ));
        }
        Ok(Prior::UniformBox { lower, upper })
    }

    /// Log density up to an additive constant; `−∞` outside a box.
    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        match self {
            Prior::Flat => Ok(0.0),
            Prior::Gaussian { mean, stddev } => {
                check_dim(mean.len(), theta.len())?;
                Ok(-0.5
                    * theta
                        .iter()
                        .zip(mean.iter().zip(stddev.iter()))
                        .map(|(t, (m, s))| ((t - m) / s).powi(2))
                        .sum::<f64>())
            }
            Prior::UniformBox { lower, upper } => {
                check_dim(lower.len(), theta.len())?;
                let inside = theta
                    .iter()
                    .zip(lower.iter().zip(upper.iter()))
                    .all(|(t, (l, u))| l <= t && t <= u);
                Ok(if inside { 0.0 } else { f64::NEG_INFINITY })
            }
        }
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `−N·L̃(θ) + log π(θ)`. Touches only the surrogate's host shard.
pub fn surrogate_log_posterior(
    s: &SurrogateLoss,
    prior: &Prior,
    theta: &DVector<f64>,
    total_samples: usize,
) -> Result<f64> {
    let lp = prior.log_density(theta)?;
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(-(total_samples as f64) * s.value(theta)? + lp)
}

/// `−N·L_N(θ) + log π(θ)` on the pooled data, with `N = pooled.n()`.
pub fn full_log_posterior(
    model: LossModel,
    pooled: &DataShard,
    prior: &Prior,
    theta: &DVector<f64>,
) -> Result<f64> {
    let lp = prior.log_density(theta)?;
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    Ok(-(pooled.n() as f64) * model.value(theta, pooled)? + lp)
}

/// A Metropolis sample path. Row `t` of `samples` is the state after step
/// `t + 1`; the starting point is not included.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub samples: DMatrix<f64>,
    pub accepted: Vec<bool>,
    pub proposal_scale: f64,
    pub burn_in: usize,
    pub seed: u64,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted.iter().filter(|a| **a).count() as f64 / self.len() as f64
    }

    /// Post-burn-in draws of one coordinate (0-based).
    pub fn marginal(&self, coordinate: usize) -> Vec<f64> {
        self.samples
            .column(coordinate)
            .iter()
            .skip(self.burn_in)
            .copied()
            .collect()
    }

    /// Post-burn-in mean.
    pub fn mean(&self) -> DVector<f64> {
        let kept = self.samples.rows(self.burn_in, self.len() - self.burn_in);
        kept.row_mean().transpose()
    }

    /// Writes `iter,accepted,theta_1..theta_d`, one row per step.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iter".to_string(), "accepted".to_string()];
        header.extend((1..=self.dim()).map(|j| format!("theta_{j}")));
        w.write_record(&header)?;
        for (t, row) in self.samples.row_iter().enumerate() {
            let mut rec = vec![(t + 1).to_string(), u8::from(self.accepted[t]).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Random-walk Metropolis with isotropic Gaussian proposals of standard
/// deviation `proposal_scale`. Burn-in is the first half of the chain.
pub fn metropolis<F>(
    mut log_target: F,
    theta0: &DVector<f64>,
    proposal_scale: f64,
    iters: usize,
    seed: u64,
) -> Result<Chain>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    if !(proposal_scale > 0.0) || !proposal_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "proposal scale must be positive, got {proposal_scale}"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let mut current = theta0.clone();
    let mut current_lp = log_target(&current)?;
    if !current_lp.is_finite() {
        return Err(Error::NonFinite("log target at the starting point"));
    }
    let d = theta0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = DMatrix::zeros(iters, d);
    let mut accepted = Vec::with_capacity(iters);
    for t in 0..iters {
        let proposal = DVector::from_fn(d, |i, _| {
            current[i] + proposal_scale * rng.sample::<f64, _>(StandardNormal)
        });
        // u is drawn every step so chains with the same seed stay aligned
        let u: f64 = rng.random();
        let lp = log_target(&proposal)?;
        if lp.is_nan() {
            return Err(Error::NonFinite("log target"));
        }
        let delta = lp - current_lp;
        let accept = delta >= 0.0 || u.ln() < delta;
        if accept {
            current = proposal;
            current_lp = lp;
        }
        accepted.push(accept);
        samples.set_row(t, &current.transpose());
    }
    Ok(Chain {
        samples,
        accepted,
        proposal_scale,
        burn_in: iters / 2,
        seed,
    })
}

/// Two random-walk Metropolis chains on different targets, driven by shared
/// randomness so that their difference reflects the targets rather than
/// Monte Carlo noise.
///
/// The first chain is bit-identical to `metropolis(target_a, theta0,
/// proposal_scale, iters, seed)`. The second draws its proposal from a
/// maximal coupling with the first chain's proposal and reuses its
/// acceptance uniform, so the chains meet and then move together for as
/// long as their accept decisions agree. Each chain on its own is an exact
/// Metropolis chain for its target.
pub fn coupled_metropolis<FA, FB>(
    mut target_a: FA,
    mut target_b: FB,
    theta0: &DVector<f64>,
    proposal_scale: f64,
    iters: usize,
    seed: u64,
) -> Result<(Chain, Chain)>
where
    FA: FnMut(&DVector<f64>) -> Result<f64>,
    FB: FnMut(&DVector<f64>) -> Result<f64>,
{
    if !(proposal_scale > 0.0) || !proposal_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "proposal scale must be positive, got {proposal_scale}"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let d = theta0.len();
    let mut a = theta0.clone();
    let mut b = theta0.clone();
    let mut lp_a = target_a(&a)?;
    let mut lp_b = target_b(&b)?;
    if !lp_a.is_finite() || !lp_b.is_finite() {
        return Err(Error::NonFinite("log target at the starting point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
    rng_b.set_stream(1);
    // log density of N(center, σ²I) at x, up to a shared constant
    let log_q = |x: &DVector<f64>, center: &DVector<f64>| {
        -(x - center).norm_squared() / (2.0 * proposal_scale * proposal_scale)
    };
    let mut samples_a = DMatrix::zeros(iters, d);
    let mut samples_b = DMatrix::zeros(iters, d);
    let mut acc_a = Vec::with_capacity(iters);
    let mut acc_b = Vec::with_capacity(iters);
    for t in 0..iters {
        let prop_a = DVector::from_fn(d, |i, _| {
            a[i] + proposal_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let u: f64 = rng.random();
        let w: f64 = rng_b.random();
        let prop_b = if w.ln() + log_q(&prop_a, &a) <= log_q(&prop_a, &b) {
            prop_a.clone()
        } else {
            loop {
                let y = DVector::from_fn(d, |i, _| {
                    b[i] + proposal_scale * rng_b.sample::<f64, _>(StandardNormal)
                });
                let w: f64 = rng_b.random();
                if w.ln() + log_q(&y, &b) > log_q(&y, &a) {
                    break y;
                }
            }
        };
        let la = target_a(&prop_a)?;
        let lb = target_b(&prop_b)?;
        if la.is_nan() || lb.is_nan() {
            return Err(Error::NonFinite("log target"));
        }
        let (da, db) = (la - lp_a, lb - lp_b);
        let accept_a = da >= 0.0 || u.ln() < da;
        let accept_b = db >= 0.0 || u.ln() < db;
        if accept_a {
            a = prop_a;
            lp_a = la;
        }
        if accept_b {
            b = prop_b;
            lp_b = lb;
        }
        acc_a.push(accept_a);
        acc_b.push(accept_b);
        samples_a.set_row(t, &a.transpose());
        samples_b.set_row(t, &b.transpose());
    }
    let chain = |samples, accepted| Chain {
        samples,
        accepted,
        proposal_scale,
        burn_in: iters / 2,
        seed,
    };
    Ok((chain(samples_a, acc_a), chain(samples_b, acc_b)))
}

/// `2.4 / sqrt(d · N · ĥ)` with ĥ the mean diagonal of the surrogate Hessian
/// at its anchor.
pub fn default_proposal_scale(s: &SurrogateLoss, total_samples: usize) -> Result<f64> {
    use crate::estimators::TwiceDifferentiable;
    let h = s.hessian(s.anchor())?;
    let d = h.nrows();
    let h_mean = h.diagonal().mean();
    if !(h_mean > 0.0) {
        return Err(Error::SingularHessian {
            min_eigenvalue: h_mean,
        });
    }
    Ok(2.4 / (d as f64 * total_samples as f64 * h_mean).sqrt())
}

/// How the surrogate anchor is computed.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSettings {
    pub start: Initializer,
    pub rounds: usize,
    pub mode: IleaMode,
    pub solver: SolverSettings,
}

impl Default for AnchorSettings {
    fn default() -> Self {
        Self {
            start: Initializer::Subsample,
            rounds: 3,
            mode: IleaMode::OneStep,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcSettings {
    pub iters: usize,
    /// Defaults to [`default_proposal_scale`] when `None`.
    pub proposal_scale: Option<f64>,
    pub seed: u64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        Self {
            iters: 20_000,
            proposal_scale: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BayesRun {
    pub chain: Chain,
    pub anchor: DVector<f64>,
    pub surrogate: SurrogateLoss,
    /// Communication spent by this run alone.
    pub ledger: CommLedger,
}

/// Anchor via ILEA, one more gradient round to build the surrogate, then
/// Metropolis on the surrogate posterior started at the anchor.
pub fn run_csl_bayes(
    cluster: &mut Cluster,
    prior: &Prior,
    anchor_settings: &AnchorSettings,
    mcmc: &McmcSettings,
) -> Result<BayesRun> {
    let before = cluster.comm_report();
    let start = anchor_settings
        .start
        .resolve(cluster, &anchor_settings.solver)?;
    let traj = ilea(
        cluster,
        &start,
        anchor_settings.rounds,
        anchor_settings.mode,
        &anchor_settings.solver,
        None,
    )?;
    let anchor = traj.last().clone();
    let surrogate = SurrogateLoss::build(cluster, &anchor)?;
    let total = cluster.total_samples();
    let scale = match mcmc.proposal_scale {
        Some(s) => s,
        None => default_proposal_scale(&surrogate, total)?,
    };
    let chain = metropolis(
        |t| surrogate_log_posterior(&surrogate, prior, t, total),
        &anchor,
        scale,
        mcmc.iters,
        mcmc.seed,
    )?;
    Ok(BayesRun {
        chain,
        anchor,
        surrogate,
        ledger: cluster.comm_report().since(&before),
    })
}

pub const DEFAULT_BINS: usize = 60;

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Histogram estimate of `∫|p − q|` between the post-burn-in marginals of
/// one coordinate. Bins span the pooled 0.5th to 99.5th percentile; draws
/// outside that range fall into the edge bins.
pub fn marginal_l1(a: &Chain, b: &Chain, coordinate: usize, bins: usize) -> Result<f64> {
    if bins < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 bins, got {bins}"
        )));
    }
    if coordinate >= a.dim() || coordinate >= b.dim() {
        return Err(Error::InvalidArgument(format!(
            "coordinate {coordinate} out of range"
        )));
    }
    let xa = a.marginal(coordinate);
    let xb = b.marginal(coordinate);
    marginal_l1_samples(&xa, &xb, bins)
}

/// [`marginal_l1`] on raw draws.
pub fn marginal_l1_samples(xa: &[f64], xb: &[f64], bins: usize) -> Result<f64> {
    if xa.is_empty() || xb.is_empty() {
        return Err(Error::InvalidArgument(
            "marginal distance needs nonempty chains".into(),
        ));
    }
    let mut pooled: Vec<f64> = xa.iter().chain(xb.iter()).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("chain samples"));
    }
    pooled.sort_by(f64::total_cmp);
    let lo = percentile(&pooled, 0.005);
    let hi = percentile(&pooled, 0.995);
    let width = hi - lo;
    let bin_of = |v: f64| -> usize {
        if !(width > 0.0) {
            return 0;
        }
        (((v - lo) / width * bins as f64).floor().max(0.0) as usize).min(bins - 1)
    };
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in xs {
            h[bin_of(v)] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (hist(xa), hist(xb));
    Ok(ha.iter().zip(hb.iter()).map(|(p, q)| (p - q).abs()).sum())
}
