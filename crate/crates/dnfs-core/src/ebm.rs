//! Energy-based-model training with the neural sampler supplying the model
//! expectation: contrastive-divergence gradients through self-normalised
//! importance weights, Ising coupling-matrix learning with l1 sparsity, the
//! deep MLP energy variant, and MMD evaluation with an exponential Hamming
//! kernel.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{self, BoundModel};
use crate::infer::WeightedSampleSet;
use crate::lenet::{LeNet, NetworkConfig, Variant};
use crate::path::{AnnealedPath, Schedule, TimeGrid};
use crate::targets::{DiscreteState, MlpEnergy, QuadraticBinaryTarget};
use crate::tensor::{adamw_step, AdamW, Arr, GradTable, ParamStore, StepOutcome, Tape};
use crate::train::{self, ReplayBuffer};
use crate::{Error, Result};

/// Learnable symmetric zero-diagonal coupling matrix, parameterised by its
/// upper triangle over spins `s = 2b - 1`.
#[derive(Clone, Debug)]
pub struct IsingEbm {
    pub n: usize,
    pub theta: Vec<f64>,
}

impl IsingEbm {
    pub fn new(n: usize) -> Self {
        IsingEbm { n, theta: vec![0.0; n * (n - 1) / 2] }
    }

    pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < n);
        i * n - i * (i + 1) / 2 + (j - i - 1)
    }

    pub fn j_matrix(&self) -> Arr {
        let n = self.n;
        let mut j = Arr::zeros(vec![n, n]);
        for a in 0..n {
            for b in a + 1..n {
                let v = self.theta[Self::pair_index(n, a, b)];
                j.data[a * n + b] = v;
                j.data[b * n + a] = v;
            }
        }
        j
    }

    /// Bit-form target `log rho(b) = b^T (4J) b - (4 J 1)^T b` for the spin
    /// model `exp(s^T J s)`.
    pub fn bit_target(&self) -> QuadraticBinaryTarget {
        let n = self.n;
        let j = self.j_matrix();
        let mut w = Arr::zeros(vec![n, n]);
        let mut h = vec![0.0; n];
        for a in 0..n {
            let mut rowsum = 0.0;
            for b in 0..n {
                w.data[a * n + b] = 4.0 * j.data[a * n + b];
                rowsum += j.data[a * n + b];
            }
            h[a] = -4.0 * rowsum;
        }
        QuadraticBinaryTarget::new(w, h).unwrap()
    }

    /// Gradient of the spin energy `E = -s^T J s` with respect to each
    /// upper-triangle coupling: `dE/dtheta_ij = -2 s_i s_j`. Additive
    /// constants between the bit and spin forms cancel inside contrastive
    /// divergence, so the spin-form gradient serves both.
    pub fn grad_energy(&self, x: &DiscreteState) -> Vec<f64> {
        let n = self.n;
        let s: Vec<f64> = x.tokens.iter().map(|&b| 2.0 * b as f64 - 1.0).collect();
        let mut g = vec![0.0; self.theta.len()];
        for a in 0..n {
            for b in a + 1..n {
                g[Self::pair_index(n, a, b)] = -2.0 * s[a] * s[b];
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct CdGradient {
    /// Log-likelihood ascent direction per parameter.
    pub ascent: Vec<f64>,
    pub ess: f64,
    /// Weights collapsed onto a single sample.
    pub degenerate: bool,
}

/// Contrastive-divergence gradient of the log-likelihood:
/// `sum_k w~_k grad E(x_k) - mean_data grad E(x)`.
pub fn cd_gradient<F>(
    grad_energy: F,
    data: &[DiscreteState],
    samples: &WeightedSampleSet,
) -> Result<CdGradient>
where
    F: Fn(&DiscreteState) -> Vec<f64>,
{
    if data.is_empty() || samples.states.is_empty() {
        return Err(Error::Domain("contrastive divergence needs data and samples".into()));
    }
    let mut ascent = grad_energy(&samples.states[0]);
    for v in ascent.iter_mut() {
        *v *= samples.normalized[0];
    }
    for (x, w) in samples.states.iter().zip(&samples.normalized).skip(1) {
        for (a, g) in ascent.iter_mut().zip(grad_energy(x)) {
            *a += w * g;
        }
    }
    let scale = 1.0 / data.len() as f64;
    for x in data {
        for (a, g) in ascent.iter_mut().zip(grad_energy(x)) {
            *a -= scale * g;
        }
    }
    let ess = samples.ess();
    let k = samples.states.len() as f64;
    Ok(CdGradient { ascent, ess, degenerate: ess < 1.0 / k + 1e-9 })
}

/// Squared maximum mean discrepancy (biased V-statistic) under the
/// exponential Hamming kernel `k(x,y) = exp(-hamming(x,y) / (d * bandwidth))`.
pub fn mmd(x: &[DiscreteState], y: &[DiscreteState], bandwidth: f64) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Domain("mmd needs non-empty sample sets".into()));
    }
    let d = x[0].len();
    if y[0].len() != d {
        return Err(Error::Shape("mmd dimension mismatch".into()));
    }
    let kernel = |a: &DiscreteState, b: &DiscreteState| -> f64 {
        let ham = a.tokens.iter().zip(&b.tokens).filter(|(p, q)| p != q).count();
        (-(ham as f64) / (d as f64 * bandwidth)).exp()
    };
    let mean_block = |a: &[DiscreteState], b: &[DiscreteState]| -> f64 {
        let mut acc = 0.0;
        for p in a {
            for q in b {
                acc += kernel(p, q);
            }
        }
        acc / (a.len() * b.len()) as f64
    };
    Ok(mean_block(x, x) + mean_block(y, y) - 2.0 * mean_block(x, y))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EbmTrainConfig {
    /// Sampler gradient steps per EBM update.
    pub sampler_steps_per_ebm_step: usize,
    pub rounds: usize,
    pub outer_batch: usize,
    pub inner_batch: usize,
    pub k_steps: usize,
    pub sampler_optimizer: AdamW,
    pub ebm_optimizer: AdamW,
    pub l1: f64,
    pub data_batch: usize,
    /// Trajectories simulated per EBM step for the importance-weighted
    /// model expectation.
    pub importance_samples: usize,
    pub seed: u64,
    pub threads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for EbmTrainConfig {
    fn default() -> Self {
        EbmTrainConfig {
            sampler_steps_per_ebm_step: 10,
            rounds: 60,
            outer_batch: 16,
            inner_batch: 8,
            k_steps: 16,
            sampler_optimizer: AdamW { lr: 1e-3, ..Default::default() },
            ebm_optimizer: AdamW { lr: 1e-2, ..Default::default() },
            l1: 0.05,
            data_batch: 128,
            importance_samples: 128,
            seed: 0,
            threads: 1,
            hidden: 32,
            layers: 2,
            heads: 2,
        }
    }
}

#[derive(Debug)]
pub struct IsingEbmResult {
    pub ebm: IsingEbm,
    pub j_learned: Arr,
    /// `-log RMSE(J_learned - J_true)` when the truth is supplied.
    pub neg_log_rmse: Option<f64>,
    pub ess_history: Vec<f64>,
}

/// Alternating loop: several sampler updates against the frozen energy,
/// then one penalised contrastive-divergence step on the couplings. The
/// sampler's target is rebuilt and its control variates re-estimated after
/// every energy update.
pub fn train_ising_ebm(
    data: &[DiscreteState],
    n: usize,
    cfg: &EbmTrainConfig,
    true_j: Option<&Arr>,
) -> Result<IsingEbmResult> {
    if data.is_empty() {
        return Err(Error::Domain("no training data".into()));
    }
    let mut ebm = IsingEbm::new(n);
    let mut ebm_store = ParamStore::new();
    ebm_store.insert("ising_ebm.theta", Arr::vector(ebm.theta.clone()))?;

    let net_cfg = NetworkConfig {
        variant: Variant::LeTf,
        d: n,
        s: 2,
        hidden: cfg.hidden,
        layers: cfg.layers,
        heads: cfg.heads,
        time_dim: 16,
        max_dist: 8,
    };
    let net = LeNet::new(net_cfg)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init_params(&mut store, &mut rng)?;

    let grid = TimeGrid::new(cfg.k_steps)?;
    let mut buffer = ReplayBuffer::new(10 * cfg.outer_batch * grid.len());
    let mut ess_history = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        // target moves with the couplings, so rebuild it and re-estimate c_t
        let path = AnnealedPath::new(std::sync::Arc::new(ebm.bit_target()), Schedule::Linear, 5.0)?;
        let trajs = {
            let frozen = BoundModel { net: &net, store: &store, bias: None };
            ctmc::simulate(&frozen, &path, &grid, cfg.outer_batch, cfg.seed.wrapping_add(500 + round as u64), cfg.threads)
        };
        let ct = train::estimate_ct_from_trajectories(&grid, &trajs);
        buffer.push_trajectories(&trajs);

        for _ in 0..cfg.sampler_steps_per_ebm_step {
            let batch = buffer.sample(cfg.inner_batch, &mut rng);
            let (tape, loss) = train::loss_batch(&net, &store, &path, &grid, &batch, &ct, None)?;
            if !tape.value(loss).data[0].is_finite() {
                return Err(Error::NonFinite(format!("sampler loss diverged at round {round}")));
            }
            let grads = tape.backward(loss)?;
            adamw_step(&mut store, &grads, &cfg.sampler_optimizer);
        }

        // fresh importance batch from the just-updated sampler
        let is_trajs = {
            let frozen = BoundModel { net: &net, store: &store, bias: None };
            ctmc::simulate(&frozen, &path, &grid, cfg.importance_samples, cfg.seed.wrapping_add(70_000 + round as u64), cfg.threads)
        };
        let samples = WeightedSampleSet::from_trajectories(&is_trajs)?;
        ess_history.push(samples.ess());
        let data_batch: Vec<DiscreteState> = (0..cfg.data_batch.min(data.len()))
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let cd = cd_gradient(|x| ebm.grad_energy(x), &data_batch, &samples)?;
        // minimise -LL + l1 |theta|; the l1 subgradient at zero is zero
        let mut grad = GradTable::default();
        let descend: Vec<f64> = cd
            .ascent
            .iter()
            .zip(&ebm.theta)
            .map(|(a, th)| -a + cfg.l1 * th.signum() * if *th == 0.0 { 0.0 } else { 1.0 })
            .collect();
        grad.insert("ising_ebm.theta".into(), Arr::vector(descend));
        if adamw_step(&mut ebm_store, &grad, &cfg.ebm_optimizer) == StepOutcome::Applied {
            ebm.theta = ebm_store.value("ising_ebm.theta").unwrap().data.clone();
        }
    }

    let j_learned = ebm.j_matrix();
    let neg_log_rmse = true_j.map(|jt| {
        let mut acc = 0.0;
        for (a, b) in j_learned.data.iter().zip(&jt.data) {
            acc += (a - b) * (a - b);
        }
        -(acc / jt.data.len() as f64).sqrt().ln()
    });
    Ok(IsingEbmResult { ebm, j_learned, neg_log_rmse, ess_history })
}

/// Fraction of true edges recovered among the top-|E| learned couplings.
pub fn edge_precision(j_learned: &Arr, adjacency: &Arr) -> f64 {
    let n = adjacency.shape[0];
    let mut true_edges = std::collections::HashSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if adjacency.data[i * n + j] != 0.0 {
                true_edges.insert((i, j));
            }
        }
    }
    if true_edges.is_empty() {
        return 1.0;
    }
    let mut scored: Vec<((usize, usize), f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            scored.push(((i, j), j_learned.data[i * n + j].abs()));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let hits = scored
        .iter()
        .take(true_edges.len())
        .filter(|(e, _)| true_edges.contains(e))
        .count();
    hits as f64 / true_edges.len() as f64
}

#[derive(Debug)]
pub struct DeepEbmResult {
    pub energy: MlpEnergy,
    pub sampler: (LeNet, ParamStore),
    pub ess_history: Vec<f64>,
}

/// The same alternating loop with a deep MLP energy. The model expectation
/// of the energy gradient is taken through a surrogate scalar
/// `sum_k w~_k E(x_k) - mean_data E(x)` whose tape gradient is exactly the
/// contrastive-divergence direction for minimising the negative
/// log-likelihood.
pub fn train_deep_ebm(
    data: &[DiscreteState],
    d: usize,
    mlp_hidden: usize,
    cfg: &EbmTrainConfig,
) -> Result<DeepEbmResult> {
    if data.is_empty() {
        return Err(Error::Domain("no training data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut energy = MlpEnergy::new(d, mlp_hidden, &mut rng);

    let net_cfg = NetworkConfig {
        variant: Variant::LeTf,
        d,
        s: 2,
        hidden: cfg.hidden,
        layers: cfg.layers,
        heads: cfg.heads,
        time_dim: 16,
        max_dist: 8,
    };
    let net = LeNet::new(net_cfg)?;
    let mut store = ParamStore::new();
    net.init_params(&mut store, &mut rng)?;

    let grid = TimeGrid::new(cfg.k_steps)?;
    let mut buffer = ReplayBuffer::new(10 * cfg.outer_batch * grid.len());
    let mut ess_history = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let path = AnnealedPath::new(std::sync::Arc::new(energy.clone()), Schedule::Linear, 5.0)?;
        let trajs = {
            let frozen = BoundModel { net: &net, store: &store, bias: None };
            ctmc::simulate(&frozen, &path, &grid, cfg.outer_batch, cfg.seed.wrapping_add(900 + round as u64), cfg.threads)
        };
        let ct = train::estimate_ct_from_trajectories(&grid, &trajs);
        buffer.push_trajectories(&trajs);

        for _ in 0..cfg.sampler_steps_per_ebm_step {
            let batch = buffer.sample(cfg.inner_batch, &mut rng);
            let (tape, loss) = train::loss_batch(&net, &store, &path, &grid, &batch, &ct, None)?;
            if !tape.value(loss).data[0].is_finite() {
                return Err(Error::NonFinite(format!("sampler loss diverged at round {round}")));
            }
            let grads = tape.backward(loss)?;
            adamw_step(&mut store, &grads, &cfg.sampler_optimizer);
        }

        let is_trajs = {
            let frozen = BoundModel { net: &net, store: &store, bias: None };
            ctmc::simulate(&frozen, &path, &grid, cfg.importance_samples, cfg.seed.wrapping_add(70_000 + round as u64), cfg.threads)
        };
        let samples = WeightedSampleSet::from_trajectories(&is_trajs)?;
        ess_history.push(samples.ess());
        let data_batch: Vec<DiscreteState> = (0..cfg.data_batch.min(data.len()))
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();

        let mut tape = Tape::new();
        let e_model = energy.energy_node(&mut tape, &energy.store, &samples.states)?;
        let weights = tape.constant(Arr::matrix(1, samples.states.len(), samples.normalized.clone()));
        let weighted = tape.matmul(weights, e_model)?;
        let pos = tape.sum(weighted)?;
        let e_data = energy.energy_node(&mut tape, &energy.store, &data_batch)?;
        let neg = tape.mean(e_data)?;
        let surrogate = tape.sub(pos, neg)?;
        let grads = tape.backward(surrogate)?;
        adamw_step(&mut energy.store, &grads, &cfg.ebm_optimizer);
    }

    Ok(DeepEbmResult { energy, sampler: (net, store), ess_history })
}
