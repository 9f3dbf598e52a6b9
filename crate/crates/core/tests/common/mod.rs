#![allow(dead_code)]

use csl::{DataShard, Link, LossModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};

pub const FAMILIES: [LossModel; 3] = [
    LossModel::Logistic,
    LossModel::Linear,
    LossModel::Glm(Link::Poisson),
];

/// `k` shards of `n` rows drawn from `model` with standard normal features
/// and a parameter of norm about one.
pub fn instance(
    model: LossModel,
    d: usize,
    n: usize,
    k: usize,
    seed: u64,
) -> (Vec<DataShard>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0) / (d as f64).sqrt());
    let shards = (0..k)
        .map(|_| {
            let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let eta = &x * &theta;
            let y = DVector::from_fn(n, |i, _| match model {
                LossModel::Logistic => {
                    let p = 1.0 / (1.0 + (-eta[i]).exp());
                    f64::from(u8::from(Bernoulli::new(p).unwrap().sample(&mut rng)))
                }
                LossModel::Linear => eta[i] + rng.sample::<f64, _>(StandardNormal),
                LossModel::Glm(_) => Poisson::new(eta[i].exp()).unwrap().sample(&mut rng),
            });
            DataShard::new(x, y).unwrap()
        })
        .collect();
    (shards, theta)
}

pub fn random_point(d: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(d, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Central differences of a scalar function.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, theta: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(theta.len(), |i, _| {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[i] += h;
        down[i] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

/// Central differences of a vector function, one column per coordinate.
pub fn fd_jacobian(
    g: impl Fn(&DVector<f64>) -> DVector<f64>,
    theta: &DVector<f64>,
) -> DMatrix<f64> {
    let d = theta.len();
    let mut jac = DMatrix::zeros(d, d);
    for i in 0..d {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[i] += h;
        down[i] -= h;
        jac.set_column(i, &((g(&up) - g(&down)) / (2.0 * h)));
    }
    jac
}

/// Sup-norm error relative to the sup-norm of the reference, floored at 1e-3.
pub fn relative_error(approx: &[f64], exact: &[f64]) -> f64 {
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
    approx
        .iter()
        .zip(exact)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Minimizer of `(1/n)‖y − Xθ‖² + λ‖θ‖₁` by trying every support and sign
/// pattern and keeping the best sign-consistent stationary point.
pub fn lasso_by_enumeration(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let (n, d) = (x.nrows() as f64, x.ncols());
    let h = x.transpose() * x * (2.0 / n);
    let b = x.transpose() * y * (2.0 / n);
    let objective = |t: &DVector<f64>| (y - x * t).norm_squared() / n + lambda * t.lp_norm(1);
    let mut best = DVector::zeros(d);
    let mut best_value = objective(&best);
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        let m = support.len();
        let h_ss = DMatrix::from_fn(m, m, |r, c| h[(support[r], support[c])]);
        let Some(chol) = h_ss.cholesky() else {
            continue;
        };
        for signs in 0u32..(1 << m) {
            let s = DVector::from_fn(m, |r, _| if signs & (1 << r) != 0 { 1.0 } else { -1.0 });
            let rhs = DVector::from_fn(m, |r, _| b[support[r]] - lambda * s[r]);
            let sol = chol.solve(&rhs);
            if (0..m).any(|r| sol[r] * s[r] <= 0.0) {
                continue;
            }
            let mut t = DVector::zeros(d);
            for (r, &i) in support.iter().enumerate() {
                t[i] = sol[r];
            }
            let v = objective(&t);
            if v < best_value {
                best_value = v;
                best = t;
            }
        }
    }
    best
}

pub fn median(values: &[f64]) -> f64 {
    csl::experiment::report::median(values)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
