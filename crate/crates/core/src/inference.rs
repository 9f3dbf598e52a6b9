//! Sandwich covariance plug-ins and Wald confidence intervals.
//!
//! Three plug-ins estimate the asymptotic covariance `Σ = H⁻¹ V H⁻¹`:
//! the pooled one, one built only from the host's per-sample surrogate
//! gradients, and one whose middle term comes from the k local gradients.

use nalgebra::{DMatrix, DVector};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::estimators::{min_eigenvalue, TwiceDifferentiable};
use crate::model::symmetrize_upper;
use crate::surrogate::SurrogateLoss;

/// Below this many machines the cross-machine middle term is too noisy to trust.
pub const CROSS_MIN_MACHINES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    /// Pooled sandwich at the global minimizer.
    GlobalSandwich,
    /// Host-only sandwich of the surrogate.
    LocalPlugin,
    /// Surrogate Hessian around the cross-machine gradient outer products.
    CrossMachinePlugin,
    /// Inverse surrogate Hessian alone (valid for negative log-likelihoods).
    InverseInformation,
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    pub kind: CovarianceKind,
    /// Samples behind the middle term.
    pub n_effective: usize,
    /// Set when the estimate was built from fewer machines than it needs.
    pub few_machines: bool,
}

/// `H⁻¹ V H⁻¹`, solved through an LU factorization and symmetrized.
pub fn sandwich(h: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !h.is_square() || h.shape() != v.shape() {
        return Err(Error::InvalidArgument(format!(
            "sandwich needs square matrices of equal shape, got {:?} and {:?}",
            h.shape(),
            v.shape()
        )));
    }
    let lu = h.clone().lu();
    let singular = || Error::SingularHessian {
        min_eigenvalue: min_eigenvalue(h),
    };
    // A = H⁻¹V, then H⁻¹VH⁻¹ = (H⁻¹Aᵀ)ᵀ for symmetric H.
    let a = lu.solve(v).ok_or_else(singular)?;
    let s = lu.solve(&a.transpose()).ok_or_else(singular)?.transpose();
    if s.iter().any(|x| !x.is_finite()) {
        return Err(singular());
    }
    Ok((&s + s.transpose()) * 0.5)
}

/// Outer-product sum `GᵀG` of per-sample gradient rows.
fn outer_sum(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = rows.tr_mul(rows);
    symmetrize_upper(&mut m);
    m
}

/// Pooled plug-in at the global minimizer. Reads every shard directly, as
/// an oracle; nothing is metered.
pub fn sigma_global(cluster: &Cluster, theta_hat: &DVector<f64>) -> Result<CovarianceEstimate> {
    let model = cluster.model();
    let d = cluster.d();
    let mut h = DMatrix::zeros(d, d);
    let mut v = DMatrix::zeros(d, d);
    for shard in cluster.shards() {
        h += model.hessian(theta_hat, shard)?;
        v += outer_sum(&model.per_sample_gradients(theta_hat, shard)?);
    }
    h /= cluster.k() as f64;
    v /= cluster.total_samples() as f64;
    Ok(CovarianceEstimate {
        sigma: sandwich(&h, &v)?,
        kind: CovarianceKind::GlobalSandwich,
        n_effective: cluster.total_samples(),
        few_machines: false,
    })
}

/// Host-only plug-in: surrogate Hessian and per-sample surrogate gradients
/// `∇ℓ(θ̃; zᵢ) − c` on the host's shard.
pub fn sigma_local(s: &SurrogateLoss, theta: &DVector<f64>) -> Result<CovarianceEstimate> {
    let h = s.hessian(theta)?;
    let rows = s.per_sample_gradients(theta)?;
    let n = rows.nrows();
    let v = outer_sum(&rows) / n as f64;
    Ok(CovarianceEstimate {
        sigma: sandwich(&h, &v)?,
        kind: CovarianceKind::LocalPlugin,
        n_effective: n,
        few_machines: false,
    })
}

/// `∇²L̃(θ̃)⁻¹`, the covariance when the loss is a negative log-likelihood.
pub fn sigma_information(s: &SurrogateLoss, theta: &DVector<f64>) -> Result<CovarianceEstimate> {
    let h = s.hessian(theta)?;
    Ok(CovarianceEstimate {
        sigma: invert_symmetric(&h)?,
        kind: CovarianceKind::InverseInformation,
        n_effective: s.shard().n(),
        few_machines: false,
    })
}

fn invert_symmetric(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = h.nrows();
    let inv = h
        .clone()
        .lu()
        .solve(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::SingularHessian {
            min_eigenvalue: min_eigenvalue(h),
        })?;
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Cross-machine plug-in: middle term `(n/k) Σⱼ ∇Lⱼ(θ̃)∇Lⱼ(θ̃)ᵀ` from one
/// gradient round. Flags `few_machines` when k < 10.
pub fn sigma_cross(
    s: &SurrogateLoss,
    cluster: &mut Cluster,
    theta: &DVector<f64>,
) -> Result<CovarianceEstimate> {
    let h = s.hessian(theta)?;
    let grads = cluster.gradient_vectors_at(theta)?;
    let d = theta.len();
    let mut v = DMatrix::zeros(d, d);
    for g in &grads {
        v += g * g.transpose();
    }
    let k = cluster.k();
    v *= cluster.n() as f64 / k as f64;
    Ok(CovarianceEstimate {
        sigma: sandwich(&h, &v)?,
        kind: CovarianceKind::CrossMachinePlugin,
        n_effective: k,
        few_machines: k < CROSS_MIN_MACHINES,
    })
}

/// Standard-normal quantile by Acklam's rational approximation
/// (relative error below 1.15e−9 over (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceIntervals {
    pub level: f64,
    pub center: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Total sample count N the covariance is scaled by.
    pub total_samples: usize,
}

impl ConfidenceIntervals {
    pub fn half_width(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] - self.lower[i])
    }

    pub fn contains(&self, i: usize, value: f64) -> bool {
        self.lower[i] <= value && value <= self.upper[i]
    }
}

/// `centerᵢ ± z₍₁₊level₎/₂ · sqrt(Σᵢᵢ / N)` for every coordinate.
pub fn confidence_intervals(
    center: &DVector<f64>,
    cov: &CovarianceEstimate,
    total_samples: usize,
    level: f64,
) -> Result<ConfidenceIntervals> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "level {level} outside (0, 1)"
        )));
    }
    if total_samples == 0 {
        return Err(Error::InvalidArgument(
            "total sample count must be positive".into(),
        ));
    }
    let d = center.len();
    if cov.sigma.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: cov.sigma.nrows(),
        });
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let mut half = DVector::zeros(d);
    for i in 0..d {
        let var = cov.sigma[(i, i)];
        if !(var >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "covariance diagonal entry {i} is {var}"
            )));
        }
        half[i] = z * (var / total_samples as f64).sqrt();
    }
    Ok(ConfidenceIntervals {
        level,
        center: center.clone(),
        lower: center - &half,
        upper: center + &half,
        total_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LossModel;
    use crate::testutil::logistic_data;
    use approx::assert_abs_diff_eq;

    fn estimate(sigma: DMatrix<f64>) -> CovarianceEstimate {
        CovarianceEstimate {
            sigma,
            kind: CovarianceKind::GlobalSandwich,
            n_effective: 1,
            few_machines: false,
        }
    }

    #[test]
    fn sandwich_of_identities() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_abs_diff_eq!(sandwich(&i, &i).unwrap(), i, epsilon = 1e-15);
        assert_abs_diff_eq!(
            sandwich(&(&i * 2.0), &i).unwrap(),
            &i * 0.25,
            epsilon = 1e-15
        );
    }

    #[test]
    fn sandwich_rejects_singular_bread() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            sandwich(&h, &DMatrix::identity(2, 2)),
            Err(Error::SingularHessian { .. })
        ));
    }

    #[test]
    fn quantiles() {
        let z = normal_quantile(0.975);
        assert!((1.959963..=1.959965).contains(&z), "{z}");
        assert_eq!(normal_quantile(0.5), 0.0);
        assert_abs_diff_eq!(normal_quantile(0.025), -z, epsilon = 1e-12);
        // tails: Φ⁻¹(1e−4) = −3.719016485...
        assert_abs_diff_eq!(normal_quantile(1e-4), -3.719016485455709, epsilon = 1e-8);
        assert_abs_diff_eq!(normal_quantile(0.9), 1.2815515655446004, epsilon = 1e-8);
    }

    #[test]
    fn interval_arithmetic() {
        let ci = confidence_intervals(
            &DVector::zeros(2),
            &estimate(DMatrix::identity(2, 2)),
            10_000,
            0.95,
        )
        .unwrap();
        assert_abs_diff_eq!(ci.half_width(0), 0.019600, epsilon = 5e-7);
        let ci = confidence_intervals(
            &DVector::from_element(1, 1.0),
            &estimate(DMatrix::from_element(1, 1, 4.0)),
            400,
            0.95,
        )
        .unwrap();
        assert_abs_diff_eq!(ci.half_width(0), 0.19600, epsilon = 5e-6);
        assert!(ci.contains(0, 1.1) && !ci.contains(0, 1.2));
    }

    #[test]
    fn interval_width_scales_as_inverse_root_n() {
        let cov = estimate(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]));
        let c = DVector::from_vec(vec![0.1, -0.2]);
        let a = confidence_intervals(&c, &cov, 1000, 0.9).unwrap();
        let b = confidence_intervals(&c, &cov, 4000, 0.9).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(a.half_width(i) / b.half_width(i), 2.0, epsilon = 1e-12);
            assert!(a.lower[i] <= c[i] && c[i] <= a.upper[i]);
        }
    }

    #[test]
    fn interval_errors() {
        let c = DVector::zeros(1);
        assert!(
            confidence_intervals(&c, &estimate(DMatrix::from_element(1, 1, -1.0)), 10, 0.95)
                .is_err()
        );
        assert!(confidence_intervals(&c, &estimate(DMatrix::identity(1, 1)), 10, 1.0).is_err());
    }

    #[test]
    fn local_plugin_equals_global_on_one_worker() {
        let data = logistic_data(3, 500, 31);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 1).unwrap();
        let theta_hat = crate::estimators::global_estimator(&mut c, &Default::default()).unwrap();
        let s = SurrogateLoss::build(&mut c, &theta_hat).unwrap();
        let local = sigma_local(&s, &theta_hat).unwrap();
        let global = sigma_global(&c, &theta_hat).unwrap();
        assert_abs_diff_eq!(local.sigma, global.sigma, epsilon = 1e-10);
    }

    #[test]
    fn cross_plugin_flags_few_machines_and_meters_one_round() {
        let data = logistic_data(2, 400, 32);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 4).unwrap();
        let theta = DVector::from_vec(vec![0.3, 0.6]);
        let s = SurrogateLoss::build(&mut c, &theta).unwrap();
        let before = c.comm_report();
        let est = sigma_cross(&s, &mut c, &theta).unwrap();
        assert!(est.few_machines);
        assert_eq!(c.comm_report().since(&before).vectors_sent, 6);
        assert_abs_diff_eq!(est.sigma.clone(), est.sigma.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn information_plugin_inverts_the_hessian() {
        let data = logistic_data(2, 300, 33);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 3).unwrap();
        let theta = DVector::from_vec(vec![0.5, 0.5]);
        let s = SurrogateLoss::build(&mut c, &theta).unwrap();
        let est = sigma_information(&s, &theta).unwrap();
        let h = s.hessian(&theta).unwrap();
        assert_abs_diff_eq!(&est.sigma * h, DMatrix::identity(2, 2), epsilon = 1e-10);
    }
}
