//! Synthetic data for the simulation designs.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{sigmoid, DataShard};

fn standard_normal_design<R: Rng>(rng: &mut R, rows: usize, d: usize) -> DMatrix<f64> {
    // drawn row by row so the stream order is independent of storage order
    let mut x = DMatrix::zeros(rows, d);
    for i in 0..rows {
        for j in 0..d {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    x
}

/// Logistic data: θ* ~ U[0,1]ᵈ (or 0 when `zero_theta`), X ~ N(0, I_d),
/// Y ~ Bernoulli(sigmoid(Xθ*)). Rows are drawn one at a time.
pub fn gen_logistic<R: Rng>(
    rng: &mut R,
    d: usize,
    total: usize,
    zero_theta: bool,
) -> Result<(DataShard, DVector<f64>)> {
    if d == 0 || total == 0 {
        return Err(Error::InvalidArgument("d and N must be positive".into()));
    }
    let theta: DVector<f64> = DVector::from_iterator(
        d,
        (0..d).map(|_| {
            let u: f64 = rng.random();
            if zero_theta {
                0.0
            } else {
                u
            }
        }),
    );
    // each row's response follows its covariates, so a shorter dataset from
    // the same stream is a prefix of a longer one
    let mut x = DMatrix::zeros(total, d);
    let mut y = DVector::zeros(total);
    for i in 0..total {
        let mut eta = 0.0;
        for j in 0..d {
            let v: f64 = rng.sample(StandardNormal);
            x[(i, j)] = v;
            eta += v * theta[j];
        }
        let u: f64 = rng.random();
        y[i] = if u < sigmoid(eta) { 1.0 } else { 0.0 };
    }
    Ok((DataShard::new(x, y)?, theta))
}

/// Sparse linear data split into `k` shards of `n` rows: `s` nonzeros of
/// magnitude 5σ with random signs on a uniformly drawn support, X and ε
/// standard normal, `y = Xθ* + σε`. With `noiseless` the σε term is dropped.
/// Shards are drawn in order, so fewer shards from the same stream are a
/// prefix of more.
#[allow(clippy::too_many_arguments)]
pub fn gen_sparse_linear<R: Rng>(
    rng: &mut R,
    d: usize,
    n: usize,
    k: usize,
    s: usize,
    sigma: f64,
    noiseless: bool,
) -> Result<(Vec<DataShard>, DVector<f64>)> {
    if d == 0 || n == 0 || k == 0 {
        return Err(Error::InvalidArgument("d, n and k must be positive".into()));
    }
    if s > d {
        return Err(Error::InvalidArgument(format!(
            "sparsity {s} exceeds dimension {d}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut support = index::sample(rng, d, s).into_vec();
    support.sort_unstable();
    let mut theta = DVector::zeros(d);
    for &j in &support {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        theta[j] = sign * 5.0 * sigma;
    }
    let mut shards = Vec::with_capacity(k);
    for _ in 0..k {
        let x = standard_normal_design(rng, n, d);
        let mut y = &x * &theta;
        for v in y.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            if !noiseless {
                *v += sigma * e;
            }
        }
        shards.push(DataShard::new(x, y)?);
    }
    Ok((shards, theta))
}
