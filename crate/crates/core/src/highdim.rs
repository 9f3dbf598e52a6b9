//! ℓ1-regularized estimation: the surrogate lasso, its iterated form, and
//! the local/averaged/pooled lasso baselines.
//!
//! All problems are `min f(θ) + λ‖θ‖₁` with a smooth `f`, solved by
//! accelerated proximal gradient (FISTA) with adaptive restart.

use nalgebra::DVector;

use crate::cluster::{mean_in_order, Cluster, LocalSolution};
use crate::error::{Error, Result};
use crate::estimators::Smooth;
use crate::model::{DataShard, LossModel, ShardLoss};
use crate::surrogate::SurrogateLoss;

/// Coefficients smaller than this in magnitude are snapped to exact zero.
pub const ZERO_SNAP: f64 = 1e-12;

/// Componentwise `sign(vᵢ)·max(|vᵢ| − t, 0)`.
pub fn soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    debug_assert!(t >= 0.0);
    v.map(|x| {
        if x > t {
            x - t
        } else if x < -t {
            x + t
        } else {
            0.0
        }
    })
}

fn l1(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Constant step size η.
    Fixed(f64),
    /// Lipschitz estimate doubled until the quadratic upper bound holds.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Settings {
    pub step: StepRule,
    /// Stop when the composite objective decreases by less than this and the
    /// proximal gradient mapping has ℓ2 norm at most this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for L1Settings {
    fn default() -> Self {
        Self {
            step: StepRule::Backtracking,
            tol: 1e-9,
            max_iters: 20_000,
        }
    }
}

impl L1Settings {
    pub fn validate(&self) -> Result<()> {
        if let StepRule::Fixed(eta) = self.step {
            if !(eta > 0.0) {
                return Err(Error::InvalidArgument("fixed step must be positive".into()));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub theta: DVector<f64>,
    /// Indices of the nonzero coefficients, ascending.
    pub support: Vec<usize>,
    /// Composite objective `f(θ) + λ‖θ‖₁` at `theta`.
    pub objective_value: f64,
    pub iterations: usize,
    /// False when the solver stopped at `max_iters`.
    pub converged: bool,
}

impl SparseEstimate {
    fn new(theta: DVector<f64>, objective_value: f64, iterations: usize, converged: bool) -> Self {
        let support = support_of(&theta);
        Self {
            theta,
            support,
            objective_value,
            iterations,
            converged,
        }
    }
}

impl LocalSolution for SparseEstimate {
    fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
}

pub fn support_of(theta: &DVector<f64>) -> Vec<usize> {
    theta
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

struct Prox<'a, F: ?Sized> {
    f: &'a F,
    lambda: f64,
}

impl<F: Smooth + ?Sized> Prox<'_, F> {
    fn composite(&self, theta: &DVector<f64>) -> Result<f64> {
        let v = self.f.value(theta)? + self.lambda * l1(theta);
        if !v.is_finite() {
            return Err(Error::NonFinite("composite objective"));
        }
        Ok(v)
    }

    /// One proximal gradient step from `y`, growing `lip` until the quadratic
    /// upper bound holds. Returns the new point and `f` there.
    fn step(
        &self,
        y: &DVector<f64>,
        fy: f64,
        gy: &DVector<f64>,
        lip: &mut f64,
        rule: StepRule,
    ) -> Result<(DVector<f64>, f64)> {
        loop {
            let x = soft_threshold(&(y - gy / *lip), self.lambda / *lip);
            let fx = self.f.value(&x)?;
            if !fx.is_finite() {
                return Err(Error::NonFinite("smooth objective"));
            }
            let diff = &x - y;
            let bound = fy + gy.dot(&diff) + 0.5 * *lip * diff.norm_squared();
            // relative slack absorbs rounding once the step is tiny
            if matches!(rule, StepRule::Fixed(_)) || fx <= bound + 1e-14 * fy.abs().max(1.0) {
                return Ok((x, fx));
            }
            *lip *= 2.0;
            if !lip.is_finite() {
                return Err(Error::NonFinite("Lipschitz estimate"));
            }
        }
    }
}

/// FISTA for `min f(θ) + λ‖θ‖₁` with momentum reset whenever the composite
/// objective increases.
///
/// On termination a final plain proximal step is taken, so the returned
/// point satisfies the subgradient optimality condition up to a small
/// multiple of `tol`. The returned objective never exceeds the objective at
/// `theta0`.
pub fn fista_l1<F: Smooth + ?Sized>(
    f: &F,
    lambda: f64,
    theta0: &DVector<f64>,
    settings: &L1Settings,
) -> Result<SparseEstimate> {
    settings.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if theta0.len() != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            found: theta0.len(),
        });
    }
    let prox = Prox { f, lambda };
    let mut lip = match settings.step {
        StepRule::Fixed(eta) => 1.0 / eta,
        StepRule::Backtracking => 1.0,
    };
    let mut x = theta0.clone();
    let mut fx = f.value(&x)?;
    let mut obj = fx + lambda * l1(&x);
    if !obj.is_finite() {
        return Err(Error::NonFinite("composite objective"));
    }
    let mut y = x.clone();
    let mut fy = fx;
    let mut t = 1.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iters {
        iterations += 1;
        let gy = f.gradient(&y)?;
        let (x_new, fx_new) = prox.step(&y, fy, &gy, &mut lip, settings.step)?;
        let obj_new = fx_new + lambda * l1(&x_new);
        if obj_new > obj {
            if t > 1.0 {
                // restart from x with no momentum
                t = 1.0;
                y = x.clone();
                fy = fx;
                continue;
            }
            if matches!(settings.step, StepRule::Fixed(_)) {
                return Err(Error::InvalidArgument(
                    "fixed step too large: a plain proximal step increased the objective".into(),
                ));
            }
        }
        let decrease = obj - obj_new;
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        t = t_new;
        x = x_new;
        fx = fx_new;
        obj = obj_new.min(obj);
        fy = if t > 1.0 { f.value(&y)? } else { fx };
        if decrease.abs() < settings.tol {
            let gx = f.gradient(&x)?;
            let mut probe_lip = lip;
            let (x_plus, f_plus) = prox.step(&x, fx, &gx, &mut probe_lip, settings.step)?;
            let mapping_norm = (&x - &x_plus).norm() * probe_lip;
            if mapping_norm <= settings.tol {
                let obj_plus = f_plus + lambda * l1(&x_plus);
                if obj_plus <= obj {
                    x = x_plus;
                    obj = obj_plus;
                }
                converged = true;
                break;
            }
        }
    }
    // snap negligible coefficients to exact zeros
    let snapped = x.map(|v| if v.abs() < ZERO_SNAP { 0.0 } else { v });
    let obj = if snapped != x {
        prox.composite(&snapped)?
    } else {
        obj
    };
    Ok(SparseEstimate::new(snapped, obj, iterations, converged))
}

/// Result of [`scaled_lasso`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledLasso {
    pub estimate: SparseEstimate,
    pub lambda: f64,
    /// Noise scale at `estimate`.
    pub sigma_hat: f64,
}

/// Lasso on one shard with `λ = c·σ̂·sqrt(ln d / n)`, where σ̂ is the noise
/// scale at the fit itself. For squared error, σ̂ starts at the response
/// standard deviation and fit and re-estimate alternate until σ̂ moves by
/// less than 0.1%.
pub fn scaled_lasso(
    model: LossModel,
    shard: &DataShard,
    multiplier: f64,
    settings: &L1Settings,
) -> Result<ScaledLasso> {
    const MAX_REFITS: usize = 25;
    const SETTLED: f64 = 1e-3;
    let loss = ShardLoss::new(model, shard);
    let (d, n) = (shard.d(), shard.n());
    let mut sigma_hat = match model {
        LossModel::Linear => {
            let y = shard.y();
            let m = y.mean();
            (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n.saturating_sub(1).max(1) as f64)
                .sqrt()
        }
        _ => 1.0,
    };
    let mut estimate = fista_l1(
        &loss,
        lambda_for(sigma_hat, d, n, multiplier),
        &DVector::zeros(d),
        settings,
    )?;
    for _ in 0..MAX_REFITS {
        let next = noise_scale(model, shard, &estimate.theta)?;
        let settled = (next - sigma_hat).abs() <= SETTLED * sigma_hat;
        sigma_hat = next;
        if settled {
            break;
        }
        estimate = fista_l1(
            &loss,
            lambda_for(sigma_hat, d, n, multiplier),
            &estimate.theta,
            settings,
        )?;
    }
    let lambda = lambda_for(sigma_hat, d, n, multiplier);
    estimate = fista_l1(&loss, lambda, &estimate.theta, settings)?;
    let sigma_hat = noise_scale(model, shard, &estimate.theta)?;
    Ok(ScaledLasso {
        estimate,
        lambda,
        sigma_hat,
    })
}

/// Lasso on one shard's loss.
pub fn local_lasso(
    model: LossModel,
    shard: &DataShard,
    lambda: f64,
    settings: &L1Settings,
) -> Result<SparseEstimate> {
    fista_l1(
        &ShardLoss::new(model, shard),
        lambda,
        &DVector::zeros(shard.d()),
        settings,
    )
}

/// Lasso on the pooled loss (out-of-protocol oracle).
pub fn global_lasso(
    cluster: &mut Cluster,
    lambda: f64,
    settings: &L1Settings,
) -> Result<SparseEstimate> {
    let pooled = cluster.pool()?;
    local_lasso(cluster.model(), &pooled, lambda, settings)
}

/// Surrogate lasso: one gradient round at `anchor`, then FISTA on
/// `L̃(θ) + λ‖θ‖₁` started from the anchor.
pub fn csl_lasso(
    cluster: &mut Cluster,
    anchor: &DVector<f64>,
    lambda: f64,
    settings: &L1Settings,
) -> Result<SparseEstimate> {
    let s = SurrogateLoss::build(cluster, anchor)?;
    fista_l1(&s, lambda, anchor, settings)
}

/// Regularization weight per round of the iterated surrogate lasso.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSchedule {
    Constant(f64),
    /// `start · factor^t` at round t (0-based).
    Geometric {
        start: f64,
        factor: f64,
    },
    /// One value per round.
    List(Vec<f64>),
}

impl LambdaSchedule {
    pub fn at(&self, round: usize) -> Result<f64> {
        match self {
            LambdaSchedule::Constant(l) => Ok(*l),
            LambdaSchedule::Geometric { start, factor } => Ok(start * factor.powi(round as i32)),
            LambdaSchedule::List(v) => v.get(round).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "lambda schedule has no entry for round {}",
                    round + 1
                ))
            }),
        }
    }
}

/// `rounds` surrogate lassos, each anchored at the previous estimate.
pub fn iterative_csl_lasso(
    cluster: &mut Cluster,
    theta0: &DVector<f64>,
    schedule: &LambdaSchedule,
    rounds: usize,
    settings: &L1Settings,
) -> Result<Vec<SparseEstimate>> {
    if rounds == 0 {
        return Err(Error::InvalidArgument(
            "at least one round is required".into(),
        ));
    }
    let mut out: Vec<SparseEstimate> = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let anchor = out.last().map_or(theta0, |e| &e.theta).clone();
        let lambda = schedule.at(t)?;
        let est =
            csl_lasso(cluster, &anchor, lambda, settings).map_err(|e| e.at_iteration(t + 1))?;
        out.push(est);
    }
    Ok(out)
}

/// Unweighted mean of the per-worker lasso solutions. The reported
/// objective is worker 1's composite objective at the mean, and the
/// iteration count sums over workers.
pub fn averaging_lasso(
    cluster: &mut Cluster,
    lambda_local: f64,
    settings: &L1Settings,
) -> Result<SparseEstimate> {
    let model = cluster.model();
    let local = cluster.gather_local(|shard| local_lasso(model, shard, lambda_local, settings))?;
    let thetas: Vec<DVector<f64>> = local.iter().map(|e| e.theta.clone()).collect();
    let mean = mean_in_order(&thetas);
    let objective =
        ShardLoss::new(model, cluster.shard(0)).value(&mean)? + lambda_local * l1(&mean);
    Ok(SparseEstimate::new(
        mean,
        objective,
        local.iter().map(|e| e.iterations).sum(),
        local.iter().all(|e| e.converged),
    ))
}

/// `multiplier · σ̂ · sqrt(ln d / m)` for a problem backed by `m` samples.
pub fn lambda_for(sigma_hat: f64, d: usize, m: usize, multiplier: f64) -> f64 {
    multiplier * sigma_hat * ((d as f64).ln() / m as f64).sqrt()
}

/// Noise scale at θ: root-mean-square residual for squared error, 1 for
/// likelihood families (unit dispersion).
pub fn noise_scale(model: LossModel, shard: &DataShard, theta: &DVector<f64>) -> Result<f64> {
    match model {
        LossModel::Linear => Ok(model.value(theta, shard)?.sqrt()),
        _ => Ok(1.0),
    }
}

/// Optimality residual of a lasso solution: the largest violation of the
/// subgradient condition `0 ∈ ∇f(θ) + λ∂‖θ‖₁` over all coordinates.
pub fn kkt_violation<F: Smooth + ?Sized>(f: &F, lambda: f64, theta: &DVector<f64>) -> Result<f64> {
    let g = f.gradient(theta)?;
    Ok(theta
        .iter()
        .zip(g.iter())
        .map(|(t, gi)| {
            if *t != 0.0 {
                (gi + lambda * t.signum()).abs()
            } else {
                (gi.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::linear_data;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    struct HalfSquared {
        a: DVector<f64>,
    }

    impl Smooth for HalfSquared {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn value(&self, t: &DVector<f64>) -> Result<f64> {
            Ok(0.5 * (t - &self.a).norm_squared())
        }
        fn gradient(&self, t: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(t - &self.a)
        }
    }

    #[test]
    fn soft_threshold_examples() {
        let v = DVector::from_vec(vec![3.0, -0.5, 1.0]);
        assert_eq!(soft_threshold(&v, 1.0).as_slice(), &[2.0, 0.0, 0.0]);
        assert_eq!(soft_threshold(&v, 0.0), v);
        assert_eq!(soft_threshold(&DVector::zeros(3), 2.0), DVector::zeros(3));
    }

    #[test]
    fn prox_identity() {
        let a = DVector::from_vec(vec![2.5, -0.3, 0.9, -4.0]);
        let est = fista_l1(
            &HalfSquared { a: a.clone() },
            1.0,
            &DVector::zeros(4),
            &L1Settings::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(est.theta, soft_threshold(&a, 1.0), epsilon = 1e-8);
        assert_eq!(est.support, vec![0, 3]);
        assert!(est.converged);
    }

    #[test]
    fn zero_lambda_matches_normal_equations() {
        let data = linear_data(4, 80, 41);
        let est = local_lasso(LossModel::Linear, &data, 0.0, &L1Settings::default()).unwrap();
        let xtx = data.x().transpose() * data.x();
        let direct = xtx.lu().solve(&(data.x().transpose() * data.y())).unwrap();
        assert_abs_diff_eq!(est.theta, direct, epsilon = 1e-6);
    }

    #[test]
    fn fixed_step_solver() {
        let a = DVector::from_vec(vec![1.5, -2.0]);
        let settings = L1Settings {
            step: StepRule::Fixed(0.5),
            ..Default::default()
        };
        let est = fista_l1(
            &HalfSquared { a: a.clone() },
            0.5,
            &DVector::zeros(2),
            &settings,
        )
        .unwrap();
        assert_abs_diff_eq!(est.theta, soft_threshold(&a, 0.5), epsilon = 1e-8);
        let bad = L1Settings {
            step: StepRule::Fixed(0.0),
            ..Default::default()
        };
        assert!(fista_l1(&HalfSquared { a }, 0.5, &DVector::zeros(2), &bad).is_err());
    }

    #[test]
    fn max_iters_is_flagged_not_fatal() {
        let data = linear_data(5, 50, 42);
        let settings = L1Settings {
            max_iters: 2,
            ..Default::default()
        };
        let est = local_lasso(LossModel::Linear, &data, 0.01, &settings).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 2);
    }

    #[test]
    fn objective_never_exceeds_start() {
        let data = linear_data(6, 60, 43);
        let loss = ShardLoss::new(LossModel::Linear, &data);
        let start = DVector::from_element(6, 0.3);
        let f0 = loss.value(&start).unwrap() + 0.2 * l1(&start);
        let est = fista_l1(&loss, 0.2, &start, &L1Settings::default()).unwrap();
        assert!(est.objective_value <= f0);
        assert!(kkt_violation(&loss, 0.2, &est.theta).unwrap() <= 10.0 * 1e-9);
    }

    #[test]
    fn huge_lambda_gives_zero() {
        let data = linear_data(5, 40, 44);
        let mut c = Cluster::from_dataset(LossModel::Linear, &data, 2).unwrap();
        let g0 = LossModel::Linear
            .gradient(&DVector::zeros(5), &data)
            .unwrap();
        let est = csl_lasso(
            &mut c,
            &DVector::zeros(5),
            g0.amax() * 1.01,
            &L1Settings::default(),
        )
        .unwrap();
        assert_eq!(est.theta, DVector::zeros(5));
        assert!(est.support.is_empty());
        assert_eq!(c.comm_report().vectors_sent, 2);
    }

    #[test]
    fn schedules() {
        assert_eq!(LambdaSchedule::Constant(0.3).at(7).unwrap(), 0.3);
        let g = LambdaSchedule::Geometric {
            start: 1.0,
            factor: 0.5,
        };
        assert_eq!(g.at(2).unwrap(), 0.25);
        assert!(LambdaSchedule::List(vec![1.0]).at(1).is_err());
    }

    #[test]
    fn iterative_single_round_is_csl_lasso() {
        let data = linear_data(8, 120, 45);
        let anchor = DVector::from_element(8, 0.1);
        let mut c1 = Cluster::from_dataset(LossModel::Linear, &data, 3).unwrap();
        let mut c2 = Cluster::from_dataset(LossModel::Linear, &data, 3).unwrap();
        let a = csl_lasso(&mut c1, &anchor, 0.05, &L1Settings::default()).unwrap();
        let b = iterative_csl_lasso(
            &mut c2,
            &anchor,
            &LambdaSchedule::Constant(0.05),
            1,
            &L1Settings::default(),
        )
        .unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(a, b[0]);
        assert!(iterative_csl_lasso(
            &mut c2,
            &anchor,
            &LambdaSchedule::Constant(0.05),
            0,
            &L1Settings::default()
        )
        .is_err());
    }

    #[test]
    fn averaging_on_identical_shards_is_local_lasso() {
        let shard = linear_data(6, 40, 46);
        let mut c = Cluster::new(LossModel::Linear, vec![shard.clone(), shard.clone()]).unwrap();
        let avg = averaging_lasso(&mut c, 0.1, &L1Settings::default()).unwrap();
        let local = local_lasso(LossModel::Linear, &shard, 0.1, &L1Settings::default()).unwrap();
        assert_abs_diff_eq!(avg.theta, local.theta, epsilon = 1e-12);
        assert_eq!(c.comm_report().vectors_sent, 1);
    }

    #[test]
    fn kkt_violation_detects_non_optimal_points() {
        let f = HalfSquared {
            a: DVector::from_vec(vec![2.0, 0.0]),
        };
        assert_eq!(
            kkt_violation(&f, 1.0, &DVector::from_vec(vec![1.0, 0.0])).unwrap(),
            0.0
        );
        assert!(kkt_violation(&f, 1.0, &DVector::zeros(2)).unwrap() > 0.9);
        let _ = DMatrix::<f64>::zeros(1, 1);
    }

    #[test]
    fn scaled_lasso_settles_near_noise_level() {
        let shard = linear_data(8, 600, 49);
        let fit = scaled_lasso(LossModel::Linear, &shard, 2.0, &L1Settings::default()).unwrap();
        assert!((fit.sigma_hat - 0.5).abs() < 0.1, "{}", fit.sigma_hat);
        assert_abs_diff_eq!(
            fit.lambda,
            lambda_for(fit.sigma_hat, 8, 600, 2.0),
            epsilon = 1e-3
        );
        assert!(
            kkt_violation(
                &ShardLoss::new(LossModel::Linear, &shard),
                fit.lambda,
                &fit.estimate.theta
            )
            .unwrap()
                < 1e-6
        );
    }
}
