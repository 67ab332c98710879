//! Single-process simulation of k-worker data-parallel training with ring
//! all-reduce, and a communication cost model for scalability estimates.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trainer::batching::EpochSampler;
use crate::trainer::optim::{clip_global_norm, learning_rate, Adam};
use crate::trainer::{batch_gradients, EncodedCorpus, Model, TrainConfig, Unit};

/// Contiguous near-equal index ranges; the first `n % k` are one longer.
pub fn shard_ranges(n: usize, k: usize) -> Vec<Range<usize>> {
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

pub fn shard_batch<T: Clone>(batch: &[T], k: usize) -> Result<Vec<Vec<T>>> {
    if k == 0 || batch.len() < k {
        return Err(Error::Usage(format!("cannot shard a batch of {} across {k} workers", batch.len())));
    }
    Ok(shard_ranges(batch.len(), k).into_iter().map(|r| batch[r].to_vec()).collect())
}

/// Sums `grads` across ranks with a ring: k-1 reduce-scatter steps then
/// k-1 all-gather steps over the chunks of [`shard_ranges`]. Chunk `c`
/// starts at rank `c` and accumulates ranks `c, c+1, ..., c+k-1` (mod k) in
/// that order. Returns the buffer held by each rank afterwards.
pub fn ring_all_reduce(grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    ring_all_reduce_shifted(grads, 0)
}

/// As [`ring_all_reduce`] with chunk `c` starting at rank `c + shift`.
/// Rotating the rank labels by `j` and passing `shift = j` reproduces the
/// unrotated result.
pub fn ring_all_reduce_shifted(grads: &[Vec<f64>], shift: usize) -> Result<Vec<Vec<f64>>> {
    let k = grads.len();
    if k == 0 {
        return Err(Error::Usage("all-reduce needs at least one rank".into()));
    }
    let n = grads[0].len();
    if let Some(g) = grads.iter().find(|g| g.len() != n) {
        return Err(Error::shape("ring_all_reduce", &[g.len()], &[n]));
    }
    let chunks = shard_ranges(n, k);
    let start = |c: usize| (c + shift) % k;
    let mut bufs = grads.to_vec();

    for step in 0..k - 1 {
        // every rank sends one chunk per step; messages are taken before
        // any receiver updates
        let msgs: Vec<(usize, usize, Vec<f64>)> = (0..k)
            .map(|c| {
                let from = (start(c) + step) % k;
                (c, (from + 1) % k, bufs[from][chunks[c].clone()].to_vec())
            })
            .collect();
        for (c, to, msg) in msgs {
            for (dst, x) in bufs[to][chunks[c].clone()].iter_mut().zip(msg) {
                *dst += x;
            }
        }
    }
    for step in 0..k - 1 {
        let msgs: Vec<(usize, usize, Vec<f64>)> = (0..k)
            .map(|c| {
                let from = (start(c) + k - 1 + step) % k;
                (c, (from + 1) % k, bufs[from][chunks[c].clone()].to_vec())
            })
            .collect();
        for (c, to, msg) in msgs {
            bufs[to][chunks[c].clone()].copy_from_slice(&msg);
        }
    }
    Ok(bufs)
}

/// Reference reducer: rank 0 gathers and sums in rank order, then
/// broadcasts.
pub fn parameter_server_reduce(grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = grads.first() else {
        return Err(Error::Usage("all-reduce needs at least one rank".into()));
    };
    let mut sum = first.clone();
    for g in &grads[1..] {
        if g.len() != sum.len() {
            return Err(Error::shape("parameter_server_reduce", &[g.len()], &[sum.len()]));
        }
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    Ok(vec![sum; grads.len()])
}

/// SHA-256 of a model's parameters in registration order.
pub fn param_hash(model: &Model) -> String {
    let mut h = Sha256::new();
    for v in model.store.flat_values() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone)]
pub struct WorkerReplica {
    pub rank: usize,
    pub model: Model,
    adam: Adam,
}

/// k replicas of one model trained in lockstep.
#[derive(Debug, Clone)]
pub struct DataParallel {
    pub replicas: Vec<WorkerReplica>,
    config: TrainConfig,
    exec: Execution,
    step: u64,
    /// Wall-clock seconds of each replica's last compute phase.
    pub last_compute_seconds: Vec<f64>,
}

impl DataParallel {
    pub fn new(model: &Model, k: usize, config: &TrainConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        if k == 0 {
            return Err(Error::Usage("need at least one worker".into()));
        }
        if config.variant != model.variant() {
            return Err(Error::Usage(format!(
                "config variant {} does not match the model's {} head",
                config.variant,
                model.variant()
            )));
        }
        let replicas = (0..k)
            .map(|rank| WorkerReplica {
                rank,
                model: model.clone(),
                adam: Adam::new(config.adam(), &model.store),
            })
            .collect();
        Ok(DataParallel {
            replicas,
            config: config.clone(),
            exec,
            step: 0,
            last_compute_seconds: vec![0.0; k],
        })
    }

    pub fn workers(&self) -> usize {
        self.replicas.len()
    }

    pub fn hashes(&self) -> Vec<String> {
        self.replicas.iter().map(|r| param_hash(&r.model)).collect()
    }

    fn check_consistent(&self) -> Result<()> {
        let hashes = self.hashes();
        match hashes.iter().position(|h| *h != hashes[0]) {
            None => Ok(()),
            Some(r) => Err(Error::Consistency(format!(
                "replica {r} has parameter hash {} but replica 0 has {}",
                hashes[r], hashes[0]
            ))),
        }
    }

    /// One synchronous step on `batch`: local gradients per shard, ring
    /// all-reduce, then the same update of `sum / k` on every replica.
    /// Returns the batch mean loss.
    pub fn step(&mut self, data: &EncodedCorpus, batch: &[Unit]) -> Result<f64> {
        self.check_consistent()?;
        let k = self.workers();
        let ranges = shard_ranges(batch.len(), k);
        if batch.len() < k {
            return Err(Error::Usage(format!("cannot shard a batch of {} across {k} workers", batch.len())));
        }
        let scale = k as f64 / batch.len() as f64;
        let (config, step) = (&self.config, self.step);
        let locals = self.exec.map(&self.replicas, |r| -> Result<(f64, Vec<f64>, f64)> {
            let t = Instant::now();
            let range = ranges[r.rank].clone();
            let (loss, grads) = batch_gradients(&r.model, config, data, &batch[range.clone()], step, range.start, scale, Execution::Sequential)?;
            Ok((loss, grads.flatten(&r.model.store), t.elapsed().as_secs_f64()))
        });
        let mut losses = Vec::with_capacity(k);
        let mut flat = Vec::with_capacity(k);
        for (r, local) in locals.into_iter().enumerate() {
            let (loss, g, secs) = local?;
            losses.push(loss);
            flat.push(g);
            self.last_compute_seconds[r] = secs;
        }
        let loss = losses.iter().sum::<f64>() / k as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss,
                batch: batch.iter().map(|u| data.groups[u.group()].group_id.clone()).collect(),
            });
        }

        let summed = ring_all_reduce(&flat)?;
        let lr = learning_rate(config.learning_rate, config.warmup_steps, config.total_steps, step);
        let max_norm = config.max_grad_norm;
        let updates: Vec<Result<()>> = {
            let mut out = Vec::with_capacity(k);
            for (r, sum) in self.replicas.iter_mut().zip(summed) {
                let mean: Vec<f64> = sum.iter().map(|x| x / k as f64).collect();
                let applied = Gradients::from_flat(&r.model.store, &mean).map(|mut g| {
                    if let Some(max) = max_norm {
                        clip_global_norm(&mut g, max);
                    }
                    r.adam.step(&mut r.model.store, &g, lr);
                    r.model.progress.step += 1;
                });
                out.push(applied);
            }
            out
        };
        updates.into_iter().collect::<Result<()>>()?;
        self.step += 1;
        self.check_consistent()?;
        Ok(loss)
    }

    /// Runs `config.total_steps` steps drawing batches exactly as the
    /// single-replica trainer does. Returns the per-step loss trace.
    pub fn train(&mut self, data: &EncodedCorpus) -> Result<Vec<f64>> {
        let units = data.units(self.config.variant);
        let mut sampler = EpochSampler::new(units.len(), self.config.seed)?;
        let mut trace = Vec::with_capacity(self.config.total_steps as usize);
        for _ in 0..self.config.total_steps {
            let batch: Vec<Unit> = sampler.next_batch(self.config.batch_size).into_iter().map(|i| units[i]).collect();
            trace.push(self.step(data, &batch)?);
        }
        Ok(trace)
    }

    pub fn into_model(mut self) -> Model {
        self.replicas.swap_remove(0).model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommCostModel {
    pub bytes_per_param: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency_per_hop: f64,
    /// Seconds.
    pub compute_time_per_step: f64,
}

impl CommCostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("bytes_per_param", self.bytes_per_param),
            ("bandwidth", self.bandwidth),
            ("latency_per_hop", self.latency_per_hop),
            ("compute_time_per_step", self.compute_time_per_step),
        ];
        for (name, v) in fields {
            if !(v > 0.0) {
                return Err(Error::Config(format!("cost model {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Bytes-over-bandwidth term of a ring all-reduce of `n_params` values.
    pub fn transfer_time(&self, n_params: usize, k: usize) -> f64 {
        if k <= 1 {
            return 0.0;
        }
        2.0 * (k - 1) as f64 / k as f64 * n_params as f64 * self.bytes_per_param / self.bandwidth
    }

    pub fn communication_time(&self, n_params: usize, k: usize) -> f64 {
        if k <= 1 {
            return 0.0;
        }
        self.transfer_time(n_params, k) + 2.0 * (k - 1) as f64 * self.latency_per_hop
    }
}

/// Seconds per step with `k` workers, each holding a fixed per-worker
/// batch.
pub fn predict_step_time(model: &CommCostModel, n_params: usize, k: usize) -> f64 {
    model.compute_time_per_step + model.communication_time(n_params, k)
}

/// One line of the scalability report. Times are seconds per step
/// (iterations per second is the reciprocal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalabilityRecord {
    pub k: usize,
    pub predicted_step_time: f64,
    pub measured_step_time: f64,
    /// Examples per second relative to one worker.
    pub speedup_vs_k1: f64,
}

/// Builds report lines from `(k, measured compute seconds)` pairs; the
/// measured time adds the modelled communication to the slowest replica's
/// compute phase.
pub fn scalability_report(cost: &CommCostModel, n_params: usize, measured: &[(usize, f64)]) -> Vec<ScalabilityRecord> {
    let step_time = |k: usize, compute: f64| compute + cost.communication_time(n_params, k);
    let base = measured.iter().find(|(k, _)| *k == 1).map(|&(_, c)| step_time(1, c));
    measured
        .iter()
        .map(|&(k, compute)| {
            let t = step_time(k, compute);
            ScalabilityRecord {
                k,
                predicted_step_time: predict_step_time(cost, n_params, k),
                measured_step_time: t,
                speedup_vs_k1: base.map_or(f64::NAN, |b| k as f64 * b / t),
            }
        })
        .collect()
}
