//! Iterative local estimation and the baselines it is compared against.
//!
//! Each ILEA iteration costs one gradient round. The next iterate is either
//! the exact minimizer of the surrogate loss or the closed-form one-step
//! update `θ̄ − ∇²L₁(θ̄)⁻¹ ∇L_N(θ̄)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cluster::{mean_in_order, Cluster, CommLedger};
use crate::error::{Error, Result};
use crate::model::ShardLoss;
use crate::surrogate::{QuadraticSurrogate, SurrogateLoss};

/// A differentiable objective.
pub trait Smooth {
    fn dim(&self) -> usize;
    fn value(&self, theta: &DVector<f64>) -> Result<f64>;
    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;
}

pub trait TwiceDifferentiable: Smooth {
    fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;
}

/// Settings for the damped Newton inner solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Stop once the gradient sup-norm is at most this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Step shrink factor of the backtracking line search, in (0, 1).
    pub shrink: f64,
    /// Armijo sufficient-decrease constant, in (0, 0.5).
    pub armijo: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 100,
            shrink: 0.5,
            armijo: 1e-4,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::InvalidArgument("grad_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument(
                "shrink factor must lie in (0, 1)".into(),
            ));
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return Err(Error::InvalidArgument(
                "Armijo constant must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton direction `−H⁻¹g`, falling back to `−(H + τI)⁻¹g` with τ doubling
/// from 1e−8 whenever the factorization fails or the direction is not a
/// descent direction.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let d = g.len();
    let mut tau = 0.0;
    loop {
        let mut m = h.clone();
        if tau > 0.0 {
            for i in 0..d {
                m[(i, i)] += tau;
            }
        }
        if let Some(chol) = m.cholesky() {
            let p = -chol.solve(g);
            if p.iter().all(|v| v.is_finite()) && p.dot(g) < 0.0 {
                return Ok(p);
            }
        }
        tau = if tau == 0.0 { 1e-8 } else { 2.0 * tau };
        if !tau.is_finite() || tau > 1e300 {
            return Err(Error::NonFinite("Newton regularization"));
        }
    }
}

/// Damped Newton with Levenberg fallback and Armijo backtracking.
///
/// Returns a point whose gradient sup-norm is at most `grad_tol` and whose
/// Newton step has sup-norm at most `sqrt(grad_tol)`. On separable logistic
/// data the gradient decays along a diverging ray while the Newton step
/// stays O(1), so such data end in `NonConvergence`.
pub fn newton_minimize<F: TwiceDifferentiable + ?Sized>(
    objective: &F,
    theta0: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    settings.validate()?;
    if theta0.len() != objective.dim() {
        return Err(Error::DimensionMismatch {
            expected: objective.dim(),
            found: theta0.len(),
        });
    }
    let step_tol = settings.grad_tol.sqrt();
    let mut theta = theta0.clone();
    let mut f = objective.value(&theta)?;
    let mut g = objective.gradient(&theta)?;
    for _ in 0..settings.max_iters {
        let g_norm = sup_norm(&g);
        if g_norm == 0.0 {
            return Ok(theta);
        }
        let h = objective.hessian(&theta)?;
        let p = newton_direction(&h, &g)?;
        if g_norm <= settings.grad_tol && sup_norm(&p) <= step_tol {
            return Ok(theta);
        }
        let slope = g.dot(&p);
        let mut t = 1.0;
        let mut accepted = None;
        // below this the loss cannot resolve the predicted decrease
        let resolvable = -slope > 64.0 * f64::EPSILON * f.abs().max(1.0);
        while resolvable && t > 1e-20 {
            let cand = &theta + &p * t;
            let fc = objective.value(&cand)?;
            if fc <= f + settings.armijo * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= settings.shrink;
        }
        match accepted {
            Some((cand, fc)) => {
                g = objective.gradient(&cand)?;
                theta = cand;
                f = fc;
            }
            None => {
                // Armijo cannot resolve decreases below rounding; take the full
                // step if it still shrinks the gradient.
                let cand = &theta + &p;
                let gc = objective.gradient(&cand)?;
                if sup_norm(&gc) < g_norm {
                    f = objective.value(&cand)?;
                    theta = cand;
                    g = gc;
                } else if g_norm <= settings.grad_tol {
                    return Ok(theta);
                } else {
                    return Err(Error::NonConvergence {
                        iterations: settings.max_iters,
                        grad_norm: g_norm,
                        last: theta,
                    });
                }
            }
        }
    }
    let grad_norm = sup_norm(&g);
    if grad_norm <= settings.grad_tol {
        let h = objective.hessian(&theta)?;
        if sup_norm(&newton_direction(&h, &g)?) <= step_tol {
            return Ok(theta);
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iters,
        grad_norm,
        last: theta,
    })
}

/// Exact minimizer of the surrogate loss. Uses only the host's data.
pub fn minimize_surrogate(
    surrogate: &SurrogateLoss,
    theta0: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    newton_minimize(surrogate, theta0, settings)
}

/// Smallest eigenvalue of the symmetric part of `h`.
pub(crate) fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    let sym = (h + h.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(*v))
}

/// Closed-form minimizer `θ̄ − H⁻¹∇L_N(θ̄)` of the quadratic surrogate.
pub fn one_step_update(q: &QuadraticSurrogate) -> Result<DVector<f64>> {
    let h = &q.local_hessian;
    let min_eig = min_eigenvalue(h);
    if !(min_eig > 1e-10) {
        return Err(Error::SingularHessian {
            min_eigenvalue: min_eig,
        });
    }
    let sym = (h + h.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or(Error::SingularHessian {
        min_eigenvalue: min_eig,
    })?;
    Ok(&q.anchor - chol.solve(&q.global_grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IleaMode {
    /// Minimize the surrogate loss exactly at every iteration.
    ExactSurrogate,
    /// Take the closed-form one-step quadratic update.
    OneStep,
}

#[derive(Debug, Clone)]
pub struct IleaTrajectory {
    pub mode: IleaMode,
    /// θ⁽⁰⁾..θ⁽ᵀ⁾.
    pub iterates: Vec<DVector<f64>>,
    /// ‖θ⁽ᵗ⁾ − θ̂‖₂ per iterate, when a reference was supplied.
    pub distances: Option<Vec<f64>>,
    pub ledger_before: CommLedger,
    pub ledger_after: CommLedger,
}

impl IleaTrajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.iterates.last().expect("trajectory holds θ⁽⁰⁾")
    }

    pub fn rounds(&self) -> usize {
        self.iterates.len() - 1
    }

    /// Per-iteration ratios ‖θ⁽ᵗ⁺¹⁾ − θ̂‖ / ‖θ⁽ᵗ⁾ − θ̂‖.
    pub fn contraction_factors(&self) -> Option<Vec<f64>> {
        self.distances
            .as_ref()
            .map(|d| d.windows(2).map(|w| w[1] / w[0]).collect())
    }
}

/// Iterative local estimation: `rounds` surrogate constructions, each
/// followed by an exact or one-step minimization on the center.
pub fn ilea(
    cluster: &mut Cluster,
    theta0: &DVector<f64>,
    rounds: usize,
    mode: IleaMode,
    settings: &SolverSettings,
    reference: Option<&DVector<f64>>,
) -> Result<IleaTrajectory> {
    let ledger_before = cluster.comm_report();
    let mut iterates = vec![theta0.clone()];
    for t in 0..rounds {
        let current = iterates.last().expect("nonempty");
        let next = match mode {
            IleaMode::ExactSurrogate => SurrogateLoss::build(cluster, current)
                .and_then(|s| minimize_surrogate(&s, current, settings)),
            IleaMode::OneStep => {
                QuadraticSurrogate::build(cluster, current).and_then(|q| one_step_update(&q))
            }
        }
        .map_err(|e| e.at_iteration(t + 1))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ILEA iterate").at_iteration(t + 1));
        }
        iterates.push(next);
    }
    let distances = reference.map(|r| {
        iterates
            .iter()
            .map(|it| (it - r).norm())
            .collect::<Vec<_>>()
    });
    Ok(IleaTrajectory {
        mode,
        iterates,
        distances,
        ledger_before,
        ledger_after: cluster.comm_report(),
    })
}

/// Unweighted mean of the per-worker minimizers.
pub fn averaging_estimator(
    cluster: &mut Cluster,
    settings: &SolverSettings,
) -> Result<DVector<f64>> {
    let local = cluster.local_minimizer_round(settings)?;
    Ok(mean_in_order(&local))
}

/// Minimizer of worker 1's loss. No communication.
pub fn subsample_estimator(cluster: &Cluster, settings: &SolverSettings) -> Result<DVector<f64>> {
    let loss = ShardLoss::new(cluster.model(), cluster.shard(0));
    newton_minimize(&loss, &DVector::zeros(cluster.d()), settings)
}

/// Minimizer of the pooled loss. Moves all data to the center, which the
/// ledger records as pooled samples rather than protocol traffic.
pub fn global_estimator(cluster: &mut Cluster, settings: &SolverSettings) -> Result<DVector<f64>> {
    let pooled = cluster.pool()?;
    let loss = ShardLoss::new(cluster.model(), &pooled);
    newton_minimize(&loss, &DVector::zeros(cluster.d()), settings)
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub global: DVector<f64>,
    pub subsample: DVector<f64>,
    pub averaging: DVector<f64>,
}

pub fn baseline_suite(cluster: &mut Cluster, settings: &SolverSettings) -> Result<Baselines> {
    Ok(Baselines {
        global: global_estimator(cluster, settings)?,
        subsample: subsample_estimator(cluster, settings)?,
        averaging: averaging_estimator(cluster, settings)?,
    })
}

/// Where ILEA starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    /// The averaging estimator (costs one local-minimizer round).
    Averaging,
    /// Worker 1's own minimizer (free).
    Subsample,
    Given(DVector<f64>),
}

impl Initializer {
    pub fn resolve(
        &self,
        cluster: &mut Cluster,
        settings: &SolverSettings,
    ) -> Result<DVector<f64>> {
        match self {
            Initializer::Averaging => averaging_estimator(cluster, settings),
            Initializer::Subsample => subsample_estimator(cluster, settings),
            Initializer::Given(v) => {
                if v.len() != cluster.d() {
                    return Err(Error::DimensionMismatch {
                        expected: cluster.d(),
                        found: v.len(),
                    });
                }
                Ok(v.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DataShard, LossModel};
    use crate::testutil::{linear_data, logistic_data};
    use approx::assert_abs_diff_eq;

    struct Quadratic {
        center: DVector<f64>,
    }

    impl Smooth for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn value(&self, t: &DVector<f64>) -> Result<f64> {
            Ok(0.5 * (t - &self.center).norm_squared())
        }
        fn gradient(&self, t: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(t - &self.center)
        }
    }

    impl TwiceDifferentiable for Quadratic {
        fn hessian(&self, t: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(DMatrix::identity(t.len(), t.len()))
        }
    }

    /// Counts Hessian evaluations, i.e. Newton iterations.
    struct Counting<'a> {
        inner: &'a Quadratic,
        hessians: std::cell::Cell<usize>,
    }

    impl Smooth for Counting<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn value(&self, t: &DVector<f64>) -> Result<f64> {
            self.inner.value(t)
        }
        fn gradient(&self, t: &DVector<f64>) -> Result<DVector<f64>> {
            self.inner.gradient(t)
        }
    }

    impl TwiceDifferentiable for Counting<'_> {
        fn hessian(&self, t: &DVector<f64>) -> Result<DMatrix<f64>> {
            self.hessians.set(self.hessians.get() + 1);
            self.inner.hessian(t)
        }
    }

    #[test]
    fn newton_solves_quadratic_in_one_step() {
        let q = Quadratic {
            center: DVector::from_vec(vec![3.0, -1.0, 0.5]),
        };
        let c = Counting {
            inner: &q,
            hessians: std::cell::Cell::new(0),
        };
        let theta = newton_minimize(
            &c,
            &DVector::from_vec(vec![-7.0, 2.0, 9.0]),
            &SolverSettings::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(theta, q.center, epsilon = 1e-14);
        // one step, then at most one stationarity check
        assert!(c.hessians.get() <= 2);
    }

    #[test]
    fn newton_matches_gradient_descent_oracle() {
        let data = logistic_data(2, 200, 11);
        let loss = ShardLoss::new(LossModel::Logistic, &data);
        let theta = newton_minimize(&loss, &DVector::zeros(2), &SolverSettings::default()).unwrap();
        // plain gradient descent with a step below 1/L (L ≤ λmax(XᵀX)/4n)
        let xtx = data.x().transpose() * data.x() / data.n() as f64;
        let lip = SymmetricEigen::new(xtx).eigenvalues.max() / 4.0;
        let step = 1.0 / lip;
        let mut gd = DVector::zeros(2);
        for _ in 0..1_000_000 {
            let g = LossModel::Logistic.gradient(&gd, &data).unwrap();
            if sup_norm(&g) < 1e-12 {
                break;
            }
            gd -= g * step;
        }
        assert_abs_diff_eq!(theta, gd, epsilon = 1e-6);
    }

    #[test]
    fn separable_logistic_data_does_not_converge() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![-1.0], vec![-0.5]];
        let s = DataShard::from_rows(&rows, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let loss = ShardLoss::new(LossModel::Logistic, &s);
        let err =
            newton_minimize(&loss, &DVector::zeros(1), &SolverSettings::default()).unwrap_err();
        match err {
            Error::NonConvergence { last, .. } => assert!(last[0] > 10.0),
            other => panic!("expected non-convergence, got {other}"),
        }
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = [
            SolverSettings {
                grad_tol: 0.0,
                ..Default::default()
            },
            SolverSettings {
                max_iters: 0,
                ..Default::default()
            },
            SolverSettings {
                shrink: 1.0,
                ..Default::default()
            },
            SolverSettings {
                armijo: 0.5,
                ..Default::default()
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn one_step_is_exact_for_squared_error_on_one_worker() {
        let data = linear_data(3, 60, 12);
        let mut c = Cluster::from_dataset(LossModel::Linear, &data, 1).unwrap();
        let q =
            QuadraticSurrogate::build(&mut c, &DVector::from_vec(vec![5.0, -5.0, 1.0])).unwrap();
        let theta = one_step_update(&q).unwrap();
        let xtx = data.x().transpose() * data.x();
        let direct = xtx.lu().solve(&(data.x().transpose() * data.y())).unwrap();
        assert_abs_diff_eq!(theta, direct, epsilon = 1e-10);
    }

    #[test]
    fn one_step_keeps_stationary_anchor() {
        let q = QuadraticSurrogate {
            anchor: DVector::from_vec(vec![1.0, 2.0]),
            global_grad: DVector::zeros(2),
            local_hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        };
        assert_eq!(one_step_update(&q).unwrap(), q.anchor);
    }

    #[test]
    fn one_step_rejects_singular_hessian() {
        let q = QuadraticSurrogate {
            anchor: DVector::zeros(2),
            global_grad: DVector::from_vec(vec![1.0, 1.0]),
            local_hessian: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        };
        match one_step_update(&q) {
            Err(Error::SingularHessian { min_eigenvalue }) => assert!(min_eigenvalue.abs() < 1e-12),
            other => panic!("expected singular Hessian, got {other:?}"),
        }
    }

    #[test]
    fn ilea_with_zero_rounds_is_a_no_op() {
        let data = logistic_data(2, 64, 13);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 4).unwrap();
        let theta0 = DVector::from_vec(vec![0.2, 0.1]);
        let traj = ilea(
            &mut c,
            &theta0,
            0,
            IleaMode::OneStep,
            &SolverSettings::default(),
            None,
        )
        .unwrap();
        assert_eq!(traj.iterates, vec![theta0]);
        assert_eq!(traj.ledger_before, traj.ledger_after);
    }

    #[test]
    fn ilea_on_one_worker_reaches_the_global_minimizer() {
        let data = logistic_data(3, 300, 14);
        let settings = SolverSettings::default();
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 1).unwrap();
        let global = global_estimator(&mut c, &settings).unwrap();
        let traj = ilea(
            &mut c,
            &DVector::zeros(3),
            1,
            IleaMode::ExactSurrogate,
            &settings,
            Some(&global),
        )
        .unwrap();
        assert_abs_diff_eq!(traj.last(), &global, epsilon = 1e-8);
        assert_eq!(traj.distances.unwrap().len(), 2);
    }

    #[test]
    fn ilea_reports_failing_iteration() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![-1.0], vec![-0.5]];
        let s = DataShard::from_rows(&rows, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut c = Cluster::new(LossModel::Logistic, vec![s]).unwrap();
        let err = ilea(
            &mut c,
            &DVector::zeros(1),
            2,
            IleaMode::ExactSurrogate,
            &SolverSettings::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 1, .. }));
    }

    #[test]
    fn baselines_coincide_on_identical_shards() {
        let shard = logistic_data(2, 128, 15);
        let mut c = Cluster::new(
            LossModel::Logistic,
            vec![shard.clone(), shard.clone(), shard],
        )
        .unwrap();
        let b = baseline_suite(&mut c, &SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(b.global, b.subsample, epsilon = 1e-8);
        assert_abs_diff_eq!(b.averaging, b.subsample, epsilon = 1e-10);
        let l = c.comm_report();
        assert_eq!((l.vectors_sent, l.samples_pooled), (2, 256));
    }

    #[test]
    fn averaging_matches_mean_of_normal_equation_solves() {
        let data = linear_data(2, 100, 16);
        let mut c = Cluster::from_dataset(LossModel::Linear, &data, 2).unwrap();
        let avg = averaging_estimator(&mut c, &SolverSettings::default()).unwrap();
        let mut expected = DVector::zeros(2);
        for s in c.shards() {
            let xtx = s.x().transpose() * s.x();
            expected += xtx.lu().solve(&(s.x().transpose() * s.y())).unwrap() / 2.0;
        }
        assert_abs_diff_eq!(avg, expected, epsilon = 1e-10);
    }

    #[test]
    fn initializer_given_checks_dimension() {
        let data = logistic_data(2, 20, 17);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 1).unwrap();
        let init = Initializer::Given(DVector::zeros(3));
        assert!(init.resolve(&mut c, &SolverSettings::default()).is_err());
    }
}
