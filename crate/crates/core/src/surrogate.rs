//! The surrogate loss `L̃(θ) = L₁(θ) − ⟨θ, ∇L₁(θ̄) − ∇L_N(θ̄)⟩` and its
//! quadratic counterpart.
//!
//! Building either costs one gradient round. Afterwards every evaluation
//! touches only the host worker's shard. Additive constants are dropped, so
//! surrogate values are meaningful only as differences.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::estimators::{Smooth, TwiceDifferentiable};
use crate::model::{DataShard, LossModel};

#[derive(Debug, Clone)]
pub struct SurrogateLoss {
    model: LossModel,
    shard: Arc<DataShard>,
    host: usize,
    anchor: DVector<f64>,
    correction: DVector<f64>,
    global_grad: DVector<f64>,
}

/// Value, gradient and Hessian of the surrogate at one point.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl SurrogateLoss {
    /// Builds the surrogate hosted on worker 1.
    pub fn build(cluster: &mut Cluster, anchor: &DVector<f64>) -> Result<Self> {
        Self::build_on(cluster, anchor, 0)
    }

    /// Builds the surrogate hosted on worker `host` (0-based).
    pub fn build_on(cluster: &mut Cluster, anchor: &DVector<f64>, host: usize) -> Result<Self> {
        if host >= cluster.k() {
            return Err(Error::InvalidArgument(format!(
                "host {host} out of range for {} workers",
                cluster.k()
            )));
        }
        let round = cluster.gradient_round(anchor)?;
        let correction = &round.local[host] - &round.global;
        Ok(Self {
            model: cluster.model(),
            shard: Arc::clone(cluster.shard(host)),
            host,
            anchor: anchor.clone(),
            correction,
            global_grad: round.global,
        })
    }

    pub fn model(&self) -> LossModel {
        self.model
    }

    pub fn shard(&self) -> &DataShard {
        &self.shard
    }

    /// 0-based index of the worker hosting this surrogate.
    pub fn host(&self) -> usize {
        self.host
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    /// `c = ∇L_host(θ̄) − ∇L_N(θ̄)`.
    pub fn correction(&self) -> &DVector<f64> {
        &self.correction
    }

    /// `∇L_N(θ̄)`.
    pub fn global_gradient(&self) -> &DVector<f64> {
        &self.global_grad
    }

    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<SurrogateEval> {
        Ok(SurrogateEval {
            value: Smooth::value(self, theta)?,
            gradient: Smooth::gradient(self, theta)?,
            hessian: TwiceDifferentiable::hessian(self, theta)?,
        })
    }

    /// Row `i` is `∇ℓ(θ; zᵢ) − c` over the host's samples.
    pub fn per_sample_gradients(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut g = self.model.per_sample_gradients(theta, &self.shard)?;
        let c = self.correction.transpose();
        for mut row in g.row_iter_mut() {
            row -= &c;
        }
        Ok(g)
    }
}

impl Smooth for SurrogateLoss {
    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok(self.model.value(theta, &self.shard)? - theta.dot(&self.correction))
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.model.gradient(theta, &self.shard)? - &self.correction)
    }
}

impl TwiceDifferentiable for SurrogateLoss {
    fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.model.hessian(theta, &self.shard)
    }
}

/// `L̃ᴴ(θ) = ⟨∇L_N(θ̄), θ − θ̄⟩ + ½⟨θ − θ̄, ∇²L₁(θ̄)(θ − θ̄)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub anchor: DVector<f64>,
    pub global_grad: DVector<f64>,
    pub local_hessian: DMatrix<f64>,
}

impl QuadraticSurrogate {
    /// One gradient round plus the Hessian of worker 1's loss at the anchor.
    pub fn build(cluster: &mut Cluster, anchor: &DVector<f64>) -> Result<Self> {
        let round = cluster.gradient_round(anchor)?;
        let local_hessian = cluster.model().hessian(anchor, cluster.shard(0))?;
        Ok(Self {
            anchor: anchor.clone(),
            global_grad: round.global,
            local_hessian,
        })
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.anchor.len() {
            return Err(Error::DimensionMismatch {
                expected: self.anchor.len(),
                found: theta.len(),
            });
        }
        Ok(())
    }
}

impl Smooth for QuadraticSurrogate {
    fn dim(&self) -> usize {
        self.anchor.len()
    }

    fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check(theta)?;
        let delta = theta - &self.anchor;
        Ok(self.global_grad.dot(&delta) + 0.5 * delta.dot(&(&self.local_hessian * &delta)))
    }

    fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(theta)?;
        let delta = theta - &self.anchor;
        Ok(&self.global_grad + &self.local_hessian * delta)
    }
}

impl TwiceDifferentiable for QuadraticSurrogate {
    fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check(theta)?;
        Ok(self.local_hessian.clone())
    }
}
