//! The k machines holding the data, and exact metering of what crosses
//! between them.
//!
//! Worker 1 (index 0) is the center machine: it issues every request, hosts
//! the surrogate loss, and reduces replies. A transfer is metered only when it
//! crosses a machine boundary, so a gradient round on k workers costs
//! `2(k − 1)` d-vectors: the broadcast of θ to workers 2..k and their replies.

pub mod tcp;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{newton_minimize, SolverSettings};
use crate::model::{DataShard, LossModel, ShardLoss};
use tcp::RemoteWorker;
use wire::{Frame, Opcode};

/// Communication counters. All counters only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct CommLedger {
    /// d-dimensional real vectors sent between distinct machines.
    pub vectors_sent: u64,
    /// Standalone scalars sent between distinct machines.
    pub scalars_sent: u64,
    /// Synchronization rounds.
    pub rounds: u64,
    /// Raw samples moved to the center outside the protocol (pooled oracles).
    pub samples_pooled: u64,
}

impl CommLedger {
    /// Payload bits of the metered vectors, at 64 bits per real.
    pub fn bits(&self, d: usize) -> u64 {
        64 * d as u64 * self.vectors_sent
    }

    /// Counter growth since an earlier snapshot.
    pub fn since(&self, earlier: &CommLedger) -> CommLedger {
        CommLedger {
            vectors_sent: self.vectors_sent - earlier.vectors_sent,
            scalars_sent: self.scalars_sent - earlier.scalars_sent,
            rounds: self.rounds - earlier.rounds,
            samples_pooled: self.samples_pooled - earlier.samples_pooled,
        }
    }
}

impl fmt::Display for CommLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vectors={} scalars={} rounds={} pooled_samples={}",
            self.vectors_sent, self.scalars_sent, self.rounds, self.samples_pooled
        )
    }
}

/// How the center reaches workers 2..k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// One address per worker 2..k, in order.
    Tcp(Vec<String>),
}

/// Result of one gradient round.
#[derive(Debug, Clone)]
pub struct GradientRound {
    /// `(1/k) Σⱼ ∇Lⱼ(θ)`, summed in ascending worker order.
    pub global: DVector<f64>,
    pub local: Vec<DVector<f64>>,
}

pub struct Cluster {
    model: LossModel,
    shards: Vec<Arc<DataShard>>,
    remotes: Option<Vec<RemoteWorker>>,
    ledger: CommLedger,
}

impl fmt::Debug for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cluster")
            .field("model", &self.model)
            .field("k", &self.k())
            .field("n", &self.n())
            .field("d", &self.d())
            .field("tcp", &self.remotes.is_some())
            .field("ledger", &self.ledger)
            .finish()
    }
}

impl Cluster {
    /// An in-process cluster. Shards must share n and d.
    pub fn new(model: LossModel, shards: Vec<DataShard>) -> Result<Self> {
        Self::with_transport(model, shards, Transport::InProcess)
    }

    /// Splits `data` into `k` equal consecutive shards.
    pub fn from_dataset(model: LossModel, data: &DataShard, k: usize) -> Result<Self> {
        Self::new(model, data.split_equal(k)?)
    }

    pub fn with_transport(
        model: LossModel,
        shards: Vec<DataShard>,
        transport: Transport,
    ) -> Result<Self> {
        let first = shards
            .first()
            .ok_or_else(|| Error::InvalidShard("a cluster needs at least one worker".into()))?;
        let (n, d) = (first.n(), first.d());
        for (j, s) in shards.iter().enumerate() {
            if s.n() != n || s.d() != d {
                return Err(Error::InvalidShard(format!(
                    "worker {} holds a {}x{} shard; all shards must be {n}x{d}",
                    j + 1,
                    s.n(),
                    s.d()
                )));
            }
            model.validate_shard(s).map_err(|e| e.at_worker(j + 1))?;
        }
        let remotes = match transport {
            Transport::InProcess => None,
            Transport::Tcp(addrs) => {
                if addrs.len() + 1 != shards.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} workers need {} remote addresses, got {}",
                        shards.len(),
                        shards.len() - 1,
                        addrs.len()
                    )));
                }
                let mut remotes = Vec::with_capacity(addrs.len());
                for (j, addr) in addrs.iter().enumerate() {
                    let mut w = RemoteWorker::connect(j + 2, addr.as_str())?;
                    w.load_shard(&shards[j + 1])?;
                    remotes.push(w);
                }
                Some(remotes)
            }
        };
        Ok(Self {
            model,
            shards: shards.into_iter().map(Arc::new).collect(),
            remotes,
            ledger: CommLedger::default(),
        })
    }

    pub fn model(&self) -> LossModel {
        self.model
    }

    /// Number of workers.
    pub fn k(&self) -> usize {
        self.shards.len()
    }

    /// Samples per worker.
    pub fn n(&self) -> usize {
        self.shards[0].n()
    }

    pub fn d(&self) -> usize {
        self.shards[0].d()
    }

    /// Total sample count `N = nk`.
    pub fn total_samples(&self) -> usize {
        self.n() * self.k()
    }

    /// Read access to every shard, for oracle computations that are outside
    /// the communication protocol. Nothing is metered.
    pub fn shards(&self) -> &[Arc<DataShard>] {
        &self.shards
    }

    pub fn shard(&self, worker: usize) -> &Arc<DataShard> {
        &self.shards[worker]
    }

    pub fn is_tcp(&self) -> bool {
        self.remotes.is_some()
    }

    /// Immutable snapshot of the communication counters.
    pub fn comm_report(&self) -> CommLedger {
        self.ledger
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                found: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("broadcast parameter"));
        }
        Ok(())
    }

    fn boundary(&self) -> u64 {
        self.k() as u64 - 1
    }

    /// Broadcasts θ and gathers every worker's local gradient.
    pub fn gradient_vectors_at(&mut self, theta: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_theta(theta)?;
        let model = self.model;
        let grads = match &mut self.remotes {
            None => self
                .shards
                .par_iter()
                .enumerate()
                .map(|(j, s)| model.gradient(theta, s).map_err(|e| e.at_worker(j + 1)))
                .collect::<Result<Vec<_>>>()?,
            Some(remotes) => {
                let request = Frame::vector(Opcode::EvalGrad, theta);
                for w in remotes.iter_mut() {
                    w.send(&request)?;
                }
                let mut grads = Vec::with_capacity(self.shards.len());
                grads.push(
                    model
                        .gradient(theta, &self.shards[0])
                        .map_err(|e| e.at_worker(1))?,
                );
                for w in remotes.iter_mut() {
                    grads.push(w.recv_vector(Opcode::GradReply, theta.len())?);
                }
                grads
            }
        };
        self.ledger.vectors_sent += 2 * self.boundary();
        self.ledger.rounds += 1;
        Ok(grads)
    }

    /// One bulk-synchronous gradient round: broadcast, local gradients, ordered average.
    pub fn gradient_round(&mut self, theta: &DVector<f64>) -> Result<GradientRound> {
        let local = self.gradient_vectors_at(theta)?;
        let global = mean_in_order(&local);
        Ok(GradientRound { global, local })
    }

    /// Every worker minimizes its own loss from θ = 0 and replies with the minimizer.
    ///
    /// Over TCP only `settings.grad_tol` is transmitted; remote workers use the
    /// default values for the remaining settings.
    pub fn local_minimizer_round(
        &mut self,
        settings: &SolverSettings,
    ) -> Result<Vec<DVector<f64>>> {
        settings.validate()?;
        let model = self.model;
        let d = self.d();
        let solve = |j: usize, s: &DataShard| {
            newton_minimize(&ShardLoss::new(model, s), &DVector::zeros(d), settings)
                .map_err(|e| e.at_worker(j + 1))
        };
        let minimizers = match &mut self.remotes {
            None => self
                .shards
                .par_iter()
                .enumerate()
                .map(|(j, s)| solve(j, s))
                .collect::<Result<Vec<_>>>()?,
            Some(remotes) => {
                let request = Frame::vector(
                    Opcode::LocalMinReq,
                    &DVector::from_element(1, settings.grad_tol),
                );
                for w in remotes.iter_mut() {
                    w.send(&request)?;
                }
                let mut out = Vec::with_capacity(self.shards.len());
                out.push(solve(0, &self.shards[0])?);
                for w in remotes.iter_mut() {
                    out.push(w.recv_vector(Opcode::LocalMinReply, d)?);
                }
                out
            }
        };
        self.ledger.scalars_sent += self.boundary();
        self.ledger.vectors_sent += self.boundary();
        self.ledger.rounds += 1;
        Ok(minimizers)
    }

    /// Runs `solve` on every worker's shard and gathers one d-vector per
    /// worker. The request is metered as one scalar per remote worker.
    /// In-process transport only.
    pub fn gather_local<T, F>(&mut self, solve: F) -> Result<Vec<T>>
    where
        T: LocalSolution + Send,
        F: Fn(&DataShard) -> Result<T> + Sync,
    {
        if self.remotes.is_some() {
            return Err(Error::Unsupported("custom local solves over TCP"));
        }
        let d = self.d();
        let out = self
            .shards
            .par_iter()
            .enumerate()
            .map(|(j, s)| {
                let v = solve(s).map_err(|e| e.at_worker(j + 1))?;
                if v.theta().len() != d {
                    return Err(Error::Worker {
                        index: j + 1,
                        message: format!(
                            "local solution has {} entries, expected {d}",
                            v.theta().len()
                        ),
                    });
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        self.ledger.scalars_sent += self.boundary();
        self.ledger.vectors_sent += self.boundary();
        self.ledger.rounds += 1;
        Ok(out)
    }

    /// Moves every sample to the center, recording `n(k − 1)` pooled samples.
    /// Only oracle baselines do this.
    pub fn pool(&mut self) -> Result<DataShard> {
        self.ledger.samples_pooled += (self.n() * (self.k() - 1)) as u64;
        DataShard::concat(self.shards.iter().map(|s| s.as_ref()))
    }

    /// Asks every remote worker to exit. A no-op in process.
    pub fn shutdown_workers(&mut self) -> Result<()> {
        if let Some(remotes) = &mut self.remotes {
            for w in remotes.iter_mut() {
                w.shutdown()?;
            }
        }
        self.remotes = None;
        Ok(())
    }
}

/// A per-worker result that carries a parameter vector.
pub trait LocalSolution {
    fn theta(&self) -> &DVector<f64>;
}

impl LocalSolution for DVector<f64> {
    fn theta(&self) -> &DVector<f64> {
        self
    }
}

/// Mean of equal-length vectors, accumulated in the given order.
pub(crate) fn mean_in_order(vs: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(vs[0].len());
    for v in vs {
        acc += v;
    }
    acc / vs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::logistic_data;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_worker_round_is_free() {
        let data = logistic_data(3, 40, 1);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 1).unwrap();
        let theta = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let r = c.gradient_round(&theta).unwrap();
        let direct = LossModel::Logistic.gradient(&theta, &data).unwrap();
        assert_eq!(r.global, direct);
        assert_eq!(c.comm_report().vectors_sent, 0);
        assert_eq!(c.comm_report().rounds, 1);
    }

    #[test]
    fn four_workers_cost_six_vectors_per_round() {
        let data = logistic_data(2, 80, 2);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 4).unwrap();
        assert_eq!(c.comm_report(), CommLedger::default());
        c.gradient_round(&DVector::zeros(2)).unwrap();
        assert_eq!(c.comm_report().vectors_sent, 6);
        assert_eq!(c.comm_report().bits(2), 6 * 2 * 64);
    }

    #[test]
    fn global_gradient_matches_pooled_data() {
        let data = logistic_data(4, 160, 3);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 8).unwrap();
        let theta = DVector::from_vec(vec![0.3, 0.1, -0.5, 0.9]);
        let r = c.gradient_round(&theta).unwrap();
        let pooled = LossModel::Logistic.gradient(&theta, &data).unwrap();
        assert_abs_diff_eq!(r.global, pooled, epsilon = 1e-12);
        for (j, g) in r.local.iter().enumerate() {
            let direct = LossModel::Logistic.gradient(&theta, c.shard(j)).unwrap();
            assert_eq!(g, &direct);
        }
    }

    #[test]
    fn gradient_vectors_average_to_round() {
        let data = logistic_data(3, 90, 4);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 3).unwrap();
        let theta = DVector::from_vec(vec![0.2, 0.2, -0.1]);
        let vs = c.gradient_vectors_at(&theta).unwrap();
        let r = c.gradient_round(&theta).unwrap();
        assert_eq!(mean_in_order(&vs), r.global);
        assert_eq!(c.comm_report().vectors_sent, 8);
    }

    #[test]
    fn identical_shards_give_identical_vectors() {
        let shard = logistic_data(2, 50, 5);
        let mut c = Cluster::new(LossModel::Logistic, vec![shard.clone(), shard]).unwrap();
        let vs = c
            .gradient_vectors_at(&DVector::from_vec(vec![0.4, -0.4]))
            .unwrap();
        assert_eq!(vs[0], vs[1]);
        let mins = c.local_minimizer_round(&SolverSettings::default()).unwrap();
        assert_abs_diff_eq!(mins[0], mins[1], epsilon = 1e-10);
    }

    #[test]
    fn local_minimizers_match_normal_equations() {
        let data = crate::testutil::linear_data(3, 120, 6);
        let mut c = Cluster::from_dataset(LossModel::Linear, &data, 3).unwrap();
        let mins = c.local_minimizer_round(&SolverSettings::default()).unwrap();
        assert_eq!(c.comm_report().vectors_sent, 2);
        for (j, m) in mins.iter().enumerate() {
            let s = c.shard(j);
            let xtx = s.x().transpose() * s.x();
            let xty = s.x().transpose() * s.y();
            let direct = xtx.lu().solve(&xty).unwrap();
            assert_abs_diff_eq!(m, &direct, epsilon = 1e-8);
        }
    }

    #[test]
    fn rejects_unequal_shards() {
        let a = logistic_data(2, 10, 7);
        let b = logistic_data(2, 12, 8);
        let err = Cluster::new(LossModel::Logistic, vec![a, b]).unwrap_err();
        assert!(matches!(err, Error::InvalidShard(_)));
    }

    #[test]
    fn rounds_are_deterministic() {
        let data = logistic_data(5, 400, 9);
        let theta = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let g1 = Cluster::from_dataset(LossModel::Logistic, &data, 8)
            .unwrap()
            .gradient_round(&theta)
            .unwrap()
            .global;
        let g2 = Cluster::from_dataset(LossModel::Logistic, &data, 8)
            .unwrap()
            .gradient_round(&theta)
            .unwrap()
            .global;
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn pooling_is_metered_separately() {
        let data = logistic_data(2, 40, 10);
        let mut c = Cluster::from_dataset(LossModel::Logistic, &data, 4).unwrap();
        let pooled = c.pool().unwrap();
        assert_eq!(pooled, data);
        let l = c.comm_report();
        assert_eq!((l.vectors_sent, l.samples_pooled), (0, 30));
    }
}
