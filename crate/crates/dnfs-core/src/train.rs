//! The sampler objective: per-state xi values, control-variate estimation
//! of the log-partition time derivative, the squared-residual loss, and the
//! coordinate-descent outer/inner training loop with a replay buffer.
//!
//! For a rate matrix parameterised through a locally equivariant network,
//! `xi_t(x) = d/dt log p~_t(x) - sum_{i,tau} ([-G]_+ e^{ratio} - [G]_+)`
//! and the training residual is `xi_t(x) - c_t` with `c_t` the current
//! estimate of `d/dt log Z_t`.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{self, BoundModel, RateModel, Trajectory};
use crate::infer;
use crate::lenet::{LeNet, StructuralBias};
use crate::path::{AnnealedPath, TimeGrid};
use crate::targets::DiscreteState;
use crate::tensor::{adamw_step, AdamW, Arr, NodeId, ParamStore, StepOutcome, Tape};
use crate::{Error, Result};

/// xi from precomputed forward/reverse rates:
/// `dt log p~ - sum_{i,tau != x_i} (rev * e^{clipped ratio} - fwd)`.
pub fn xi_with_rates(path: &AnnealedPath, t: f64, x: &DiscreteState, fwd: &Arr, rev: &Arr) -> f64 {
    let ratios = path.neighbor_log_ratios(t, x);
    let mut stein = 0.0;
    for idx in 0..ratios.numel() {
        let r = rev.data[idx];
        let f = fwd.data[idx];
        if r != 0.0 {
            stein += r * ratios.data[idx].exp();
        }
        stein -= f;
    }
    path.dt_log_p_tilde(t, x) - stein
}

/// xi for an arbitrary rate model; non-finite results are reported with
/// their (t, x) context.
pub fn xi(path: &AnnealedPath, model: &dyn RateModel, t: f64, x: &DiscreteState) -> Result<f64> {
    let (fwd, rev) = model.rates_pair(t, x);
    let v = xi_with_rates(path, t, x, &fwd, &rev);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("xi at t={t}, x={:?}", x.tokens)));
    }
    Ok(v)
}

/// Differentiable xi node built from a network forward pass; the target
/// ratios and the time derivative enter as constants.
pub fn xi_node(
    tape: &mut Tape,
    net: &LeNet,
    store: &ParamStore,
    path: &AnnealedPath,
    t: f64,
    x: &DiscreteState,
    bias: Option<&StructuralBias>,
) -> Result<NodeId> {
    let g = net.g_node(tape, store, t, x, bias)?;
    let ratios = path.neighbor_log_ratios(t, x);
    let rho: Vec<f64> = ratios.data.iter().map(|r| r.exp()).collect();
    let rho = tape.constant(Arr::new(ratios.shape.clone(), rho));
    let neg = tape.neg(g)?;
    let rev = tape.relu(neg)?;
    let fwd = tape.relu(g)?;
    let inflow = tape.mul(rev, rho)?;
    let net_term = tape.sub(inflow, fwd)?;
    let stein = tape.sum(net_term)?;
    let dt = tape.constant(Arr::scalar(path.dt_log_p_tilde(t, x)));
    Ok(tape.sub(dt, stein)?)
}

/// Per-grid-time control variates `c_{t_k}`.
#[derive(Clone, Debug, Default)]
pub struct CtTable {
    pub values: Vec<f64>,
}

impl CtTable {
    pub fn zeros(grid: &TimeGrid) -> Self {
        CtTable { values: vec![0.0; grid.len()] }
    }

    pub fn mean_abs(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
        }
    }
}

/// States observed at one grid time, optionally with normalised weights.
pub struct CtBatch {
    pub k: usize,
    pub states: Vec<DiscreteState>,
    pub weights: Option<Vec<f64>>,
}

/// `c_{t_k} = (weighted) mean of xi over the batch at t_k`, the minimiser of
/// the squared deviation and an estimate of `d/dt log Z_t`. Model parameters
/// are treated as constants.
pub fn estimate_ct(
    path: &AnnealedPath,
    model: &dyn RateModel,
    grid: &TimeGrid,
    batches: &[CtBatch],
) -> Result<CtTable> {
    let mut table = CtTable::zeros(grid);
    let mut seen = vec![false; grid.len()];
    for b in batches {
        if b.states.is_empty() {
            return Err(Error::Domain(format!("empty batch at grid index {}", b.k)));
        }
        if b.k >= grid.len() {
            return Err(Error::Domain(format!("grid index {} out of range", b.k)));
        }
        let t = grid.time(b.k);
        let mut acc = 0.0;
        match &b.weights {
            None => {
                for x in &b.states {
                    acc += xi(path, model, t, x)?;
                }
                acc /= b.states.len() as f64;
            }
            Some(w) => {
                if w.len() != b.states.len() {
                    return Err(Error::Shape("weights/states length mismatch".into()));
                }
                for (x, wi) in b.states.iter().zip(w) {
                    acc += wi * xi(path, model, t, x)?;
                }
            }
        }
        table.values[b.k] = acc;
        seen[b.k] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Domain("every grid time needs at least one sample".into()));
    }
    Ok(table)
}

/// Control variates from freshly simulated trajectories, reusing the xi
/// values recorded during simulation (plain per-time means, as the outer
/// loop prescribes).
pub fn estimate_ct_from_trajectories(grid: &TimeGrid, trajs: &[Trajectory]) -> CtTable {
    let mut table = CtTable::zeros(grid);
    for k in 0..grid.len() {
        let mut acc = 0.0;
        for t in trajs {
            acc += t.xis[k];
        }
        table.values[k] = acc / trajs.len() as f64;
    }
    table
}

/// Control variates weighted by the running importance weight
/// `w_k = sum_{j<k} xi_j dt` of each trajectory, self-normalised per grid
/// time. The weighted mean stays a consistent estimate of `E_{p_t}[xi]`
/// even when the chain's own marginals are far from `p_t`, which matters
/// under aggressive temperature annealing.
pub fn estimate_ct_weighted_from_trajectories(grid: &TimeGrid, trajs: &[Trajectory]) -> CtTable {
    let dt = grid.dt();
    let mut table = CtTable::zeros(grid);
    let mut running: Vec<f64> = vec![0.0; trajs.len()];
    for k in 0..grid.len() {
        let max = running.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        let mut acc = 0.0;
        for (m, t) in trajs.iter().enumerate() {
            let w = (running[m] - max).exp();
            norm += w;
            acc += w * t.xis[k];
        }
        table.values[k] = acc / norm;
        if k < grid.steps {
            for (m, t) in trajs.iter().enumerate() {
                running[m] += t.xis[k] * dt;
            }
        }
    }
    table
}

/// FIFO buffer of (grid index, state) pairs with uniform sampling.
pub struct ReplayBuffer {
    entries: VecDeque<(usize, DiscreteState)>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { entries: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, k: usize, x: DiscreteState) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((k, x));
    }

    pub fn push_trajectories(&mut self, trajs: &[Trajectory]) {
        for t in trajs {
            for (k, x) in t.states.iter().enumerate() {
                self.push(k, x.clone());
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<(usize, DiscreteState)> {
        (0..n)
            .map(|_| {
                let idx = rng.random_range(0..self.entries.len());
                self.entries[idx].clone()
            })
            .collect()
    }
}

/// Mean over the batch of `(xi_t(x) - c_t)^2`, differentiable in the model
/// parameters. Returns the recording tape and the loss node.
pub fn loss_batch(
    net: &LeNet,
    store: &ParamStore,
    path: &AnnealedPath,
    grid: &TimeGrid,
    batch: &[(usize, DiscreteState)],
    ct: &CtTable,
    bias: Option<&StructuralBias>,
) -> Result<(Tape, NodeId)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty loss batch".into()));
    }
    let mut tape = Tape::new();
    let mut residuals = Vec::with_capacity(batch.len());
    for (k, x) in batch {
        let t = grid.time(*k);
        let xi = xi_node(&mut tape, net, store, path, t, x, bias)?;
        let c = tape.constant(Arr::scalar(ct.values[*k]));
        let delta = tape.sub(xi, c)?;
        residuals.push(tape.square(delta)?);
    }
    let stacked = if residuals.len() == 1 {
        residuals[0]
    } else {
        tape.concat(&residuals, 0)?
    };
    let loss = tape.mean(stacked)?;
    Ok((tape, loss))
}

/// Scalar network `c_t^phi` of time, for the jointly-optimised variant of
/// the objective.
#[derive(Clone, Debug)]
pub struct CtNet {
    pub time_dim: usize,
    pub hidden: usize,
}

pub const CT_NET_PREFIX: &str = "ct";

impl CtNet {
    pub fn new(time_dim: usize, hidden: usize) -> Self {
        CtNet { time_dim, hidden }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) -> Result<()> {
        let a = (1.0 / self.time_dim as f64).sqrt();
        let w1: Vec<f64> =
            (0..self.time_dim * self.hidden).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect();
        store.insert(&format!("{CT_NET_PREFIX}.w1"), Arr::matrix(self.time_dim, self.hidden, w1))?;
        store.insert(&format!("{CT_NET_PREFIX}.b1"), Arr::zeros(vec![self.hidden]))?;
        store.insert(&format!("{CT_NET_PREFIX}.w2"), Arr::zeros(vec![self.hidden, 1]))?;
        store.insert(&format!("{CT_NET_PREFIX}.b2"), Arr::zeros(vec![1]))?;
        Ok(())
    }

    pub fn value_node(&self, tape: &mut Tape, store: &ParamStore, t: f64) -> Result<NodeId> {
        let feats = tape.constant(Arr::matrix(1, self.time_dim, crate::lenet::time_features(t, self.time_dim)));
        let w1 = tape.param(store, &format!("{CT_NET_PREFIX}.w1"))?;
        let b1 = tape.param(store, &format!("{CT_NET_PREFIX}.b1"))?;
        let w2 = tape.param(store, &format!("{CT_NET_PREFIX}.w2"))?;
        let b2 = tape.param(store, &format!("{CT_NET_PREFIX}.b2"))?;
        let z = tape.matmul(feats, w1)?;
        let z = tape.add(z, b1)?;
        let a = tape.relu(z)?;
        let out = tape.matmul(a, w2)?;
        let out = tape.add(out, b2)?;
        tape.sum(out)
    }

    pub fn value(&self, store: &ParamStore, t: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let node = self.value_node(&mut tape, store, t)?;
        Ok(tape.value(node).data[0])
    }
}

/// Joint objective `mean (xi_t(x) - c_t^phi)^2`, differentiable in both the
/// rate-network and the ct-network parameters.
pub fn pinn_loss(
    net: &LeNet,
    ct_net: &CtNet,
    store: &ParamStore,
    path: &AnnealedPath,
    grid: &TimeGrid,
    batch: &[(usize, DiscreteState)],
    bias: Option<&StructuralBias>,
) -> Result<(Tape, NodeId)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty loss batch".into()));
    }
    let mut tape = Tape::new();
    let mut residuals = Vec::with_capacity(batch.len());
    for (k, x) in batch {
        let t = grid.time(*k);
        let xi = xi_node(&mut tape, net, store, path, t, x, bias)?;
        let c = ct_net.value_node(&mut tape, store, t)?;
        let delta = tape.sub(xi, c)?;
        residuals.push(tape.square(delta)?);
    }
    let stacked = if residuals.len() == 1 {
        residuals[0]
    } else {
        tape.concat(&residuals, 0)?
    };
    let loss = tape.mean(stacked)?;
    Ok((tape, loss))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Trajectories simulated per outer iteration.
    pub outer_batch: usize,
    /// Loss batch size per inner step.
    pub inner_batch: usize,
    /// Inner gradient steps per outer iteration.
    pub inner_steps: usize,
    /// Outer iterations.
    pub epochs: usize,
    pub optimizer: AdamW,
    /// Buffer capacity in outer batches.
    pub buffer_factor: usize,
    pub seed: u64,
    /// Trajectory fan-out width.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_batch: 32,
            inner_batch: 16,
            inner_steps: 100,
            epochs: 100,
            optimizer: AdamW { lr: 1e-3, ..Default::default() },
            buffer_factor: 10,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub mean_abs_ct: f64,
    pub ess: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub metrics: Vec<EpochMetrics>,
    /// Inner steps skipped because the loss or gradients were non-finite.
    pub skipped_steps: usize,
    pub interrupted: bool,
}

/// Coordinate-descent training: simulate under the frozen model, refresh
/// the control variates, then take inner gradient steps on buffer batches.
/// Checkpointing is the caller's concern; `stop` is polled between inner
/// steps so an interrupt still yields a usable model.
pub fn train_loop(
    net: &LeNet,
    store: &mut ParamStore,
    path: &AnnealedPath,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    bias: Option<&StructuralBias>,
    stop: Option<&AtomicBool>,
) -> Result<TrainResult> {
    if cfg.outer_batch == 0 || cfg.inner_batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch sizes and epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buffer = ReplayBuffer::new(cfg.buffer_factor * cfg.outer_batch * grid.len());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0usize;
    let mut interrupted = false;

    'outer: for epoch in 0..cfg.epochs {
        let (ct, ess) = {
            let frozen = BoundModel { net, store, bias };
            let trajs = ctmc::simulate(
                &frozen,
                path,
                grid,
                cfg.outer_batch,
                cfg.seed.wrapping_add(1 + epoch as u64),
                cfg.threads,
            );
            let ct = estimate_ct_from_trajectories(grid, &trajs);
            let ess = infer::ess(&ctmc::log_weights(&trajs)).unwrap_or(0.0);
            buffer.push_trajectories(&trajs);
            (ct, ess)
        };

        let mut loss_acc = 0.0;
        let mut loss_n = 0usize;
        for _ in 0..cfg.inner_steps {
            if let Some(flag) = stop {
                if flag.load(Ordering::Relaxed) {
                    interrupted = true;
                    break 'outer;
                }
            }
            let batch = buffer.sample(cfg.inner_batch, &mut rng);
            let (tape, loss) = loss_batch(net, store, path, grid, &batch, &ct, bias)?;
            let loss_val = tape.value(loss).data[0];
            if !loss_val.is_finite() {
                skipped += 1;
                continue;
            }
            let grads = tape.backward(loss)?;
            if adamw_step(store, &grads, &cfg.optimizer) == StepOutcome::SkippedNonFinite {
                skipped += 1;
                continue;
            }
            loss_acc += loss_val;
            loss_n += 1;
        }
        metrics.push(EpochMetrics {
            epoch,
            loss: if loss_n > 0 { loss_acc / loss_n as f64 } else { f64::NAN },
            mean_abs_ct: ct.mean_abs(),
            ess,
        });
    }
    Ok(TrainResult { metrics, skipped_steps: skipped, interrupted })
}
