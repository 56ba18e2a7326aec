//! Euler discretisation of the learned CTMC and trajectory bookkeeping for
//! importance weights.
//!
//! Each grid step evaluates the model once at the current state; forward
//! rates drive the Euler kernel while the same evaluation yields the
//! per-step xi value whose time integral is the trajectory log-weight.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lenet::{LeNet, StructuralBias};
use crate::path::{AnnealedPath, TimeGrid};
use crate::targets::DiscreteState;
use crate::tensor::{Arr, ParamStore};
use crate::train;

/// Anything that produces per-state transition rates at a given time.
///
/// `g_values` returns the raw d x S network output; forward rates are its
/// positive part. `rates_pair` additionally returns the reverse rates
/// `R(x, Swap(x,i,tau))`, which for locally equivariant networks are the
/// positive part of `-G` and need no extra evaluation.
pub trait RateModel: Sync {
    fn dims(&self) -> (usize, usize);

    fn g_values(&self, t: f64, x: &DiscreteState) -> Arr;

    /// (forward rates, reverse rates) from a single evaluation.
    fn rates_pair(&self, t: f64, x: &DiscreteState) -> (Arr, Arr) {
        let g = self.g_values(t, x);
        let mut fwd = g.clone();
        let mut rev = g;
        for v in fwd.data.iter_mut() {
            *v = v.max(0.0);
        }
        for v in rev.data.iter_mut() {
            *v = (-*v).max(0.0);
        }
        (fwd, rev)
    }
}

/// A locally equivariant network bound to its parameters (and, for the
/// graph-conditioned variant, the structural bias of one graph).
pub struct BoundModel<'a> {
    pub net: &'a LeNet,
    pub store: &'a ParamStore,
    pub bias: Option<&'a StructuralBias>,
}

impl RateModel for BoundModel<'_> {
    fn dims(&self) -> (usize, usize) {
        // a graph bias pins the instance size, which may be below the
        // network's configured capacity
        let d = self.bias.map(|b| b.d).unwrap_or(self.net.config.d);
        (d, self.net.config.s)
    }

    fn g_values(&self, t: f64, x: &DiscreteState) -> Arr {
        self.net.g_matrix(self.store, t, x, self.bias).expect("network forward")
    }
}

/// The identity chain: all rates zero.
pub struct ZeroRates {
    pub d: usize,
    pub s: usize,
}

impl RateModel for ZeroRates {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.s)
    }

    fn g_values(&self, _t: f64, _x: &DiscreteState) -> Arr {
        Arr::zeros(vec![self.d, self.s])
    }
}

/// One-step categorical over single-coordinate flips plus staying put.
#[derive(Clone, Debug)]
pub struct StepDistribution {
    /// d x S flip probabilities; the (i, x_i) entries are zero.
    pub flip_probs: Arr,
    pub stay: f64,
}

/// Flip probabilities `[G]_+ * dt` with the stay probability clamped at
/// zero and flips renormalised when the rates are too large for `dt`.
pub fn step_distribution(g: &Arr, dt: f64) -> StepDistribution {
    assert!(dt > 0.0, "dt must be positive");
    let mut flip = g.clone();
    let mut total = 0.0;
    for v in flip.data.iter_mut() {
        *v = v.max(0.0) * dt;
        total += *v;
    }
    if total <= 1.0 {
        StepDistribution { flip_probs: flip, stay: 1.0 - total }
    } else {
        for v in flip.data.iter_mut() {
            *v /= total;
        }
        StepDistribution { flip_probs: flip, stay: 0.0 }
    }
}

/// Sample the Euler kernel once; at most one coordinate changes.
/// Returns the next state and the flip (position, old, new) if any.
pub fn euler_step(
    g: &Arr,
    x: &DiscreteState,
    dt: f64,
    rng: &mut impl Rng,
) -> (DiscreteState, Option<(usize, u8, u8)>) {
    let dist = step_distribution(g, dt);
    let s = g.shape[1];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, &p) in dist.flip_probs.data.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        if u < acc {
            let i = idx / s;
            let tau = (idx % s) as u8;
            let old = x.tokens[i];
            return (x.swap(i, tau), Some((i, old, tau)));
        }
    }
    (x.clone(), None)
}

#[derive(Clone, Debug)]
pub struct JumpRecord {
    pub step: usize,
    pub position: usize,
    pub from: u8,
    pub to: u8,
}

/// One simulated chain: states at every grid time, xi at every grid time,
/// and the left-endpoint quadrature of xi as the importance log-weight.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<DiscreteState>,
    pub xis: Vec<f64>,
    pub log_weight: f64,
    pub jumps: Vec<JumpRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DiscreteState {
        self.states.last().unwrap()
    }
}

fn uniform_state(d: usize, s: usize, rng: &mut impl Rng) -> DiscreteState {
    DiscreteState::new((0..d).map(|_| rng.random_range(0..s as u8)) .collect())
}

fn run_one(
    model: &dyn RateModel,
    path: &AnnealedPath,
    grid: &TimeGrid,
    refine_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let (d, s) = model.dims();
    let dt = grid.dt();
    let mut x = uniform_state(d, s, rng);
    let mut states = Vec::with_capacity(grid.len());
    let mut xis = Vec::with_capacity(grid.len());
    let mut jumps = Vec::new();
    let mut log_weight = 0.0;
    states.push(x.clone());
    for k in 0..grid.steps {
        let t = grid.time(k);
        let (fwd, rev) = model.rates_pair(t, &x);
        let xi_k = train::xi_with_rates(path, t, &x, &fwd, &rev);
        xis.push(xi_k);
        log_weight += xi_k * dt;
        let (next, jump) = euler_step(&fwd, &x, dt, rng);
        if let Some((i, from, to)) = jump {
            jumps.push(JumpRecord { step: k, position: i, from, to });
        }
        x = next;
        if refine_steps > 0 {
            let t_next = grid.time(k + 1);
            crate::mcmc::mh_refine(path, t_next, &mut x, refine_steps, rng);
        }
        states.push(x.clone());
    }
    let (fwd, rev) = model.rates_pair(1.0, &x);
    xis.push(train::xi_with_rates(path, 1.0, &x, &fwd, &rev));
    Trajectory { states, xis, log_weight, jumps }
}

/// Simulate `count` independent trajectories from the uniform prior.
/// Every trajectory has its own RNG stream keyed by its index, so results
/// are identical however the work is split across threads.
pub fn simulate(
    model: &dyn RateModel,
    path: &AnnealedPath,
    grid: &TimeGrid,
    count: usize,
    seed: u64,
    threads: usize,
) -> Vec<Trajectory> {
    simulate_refined(model, path, grid, count, 0, seed, threads)
}

/// As [`simulate`], applying `refine_steps` locally informed MH moves that
/// target the interpolated distribution after every Euler update.
pub fn simulate_refined(
    model: &dyn RateModel,
    path: &AnnealedPath,
    grid: &TimeGrid,
    count: usize,
    refine_steps: usize,
    seed: u64,
    threads: usize,
) -> Vec<Trajectory> {
    let run = |j: usize| -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        run_one(model, path, grid, refine_steps, &mut rng)
    };
    if threads <= 1 || count <= 1 {
        (0..count).map(run).collect()
    } else {
        let workers = threads.min(count);
        let mut out: Vec<Option<Trajectory>> = (0..count).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunk = count.div_ceil(workers);
            for (w, slot) in out.chunks_mut(chunk).enumerate() {
                let run = &run;
                scope.spawn(move || {
                    for (off, s) in slot.iter_mut().enumerate() {
                        *s = Some(run(w * chunk + off));
                    }
                });
            }
        });
        out.into_iter().map(|t| t.unwrap()).collect()
    }
}

/// Final states of a trajectory batch.
pub fn final_states(trajs: &[Trajectory]) -> Vec<DiscreteState> {
    trajs.iter().map(|t| t.final_state().clone()).collect()
}

/// Trajectory log-weights.
pub fn log_weights(trajs: &[Trajectory]) -> Vec<f64> {
    trajs.iter().map(|t| t.log_weight).collect()
}

/// Serialise trajectories as JSON lines with jump logs.
pub fn trajectories_to_jsonl(trajs: &[Trajectory]) -> String {
    let mut out = String::new();
    for (i, t) in trajs.iter().enumerate() {
        let jumps: Vec<serde_json::Value> = t
            .jumps
            .iter()
            .map(|j| serde_json::json!({"step": j.step, "i": j.position, "from": j.from, "to": j.to}))
            .collect();
        let line = serde_json::json!({
            "trajectory": i,
            "initial": t.states[0].tokens,
            "final": t.final_state().tokens,
            "log_weight": t.log_weight,
            "jumps": jumps,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{QuadraticBinaryTarget, UniformTarget};
    use std::sync::Arc;

    fn uniform_path(d: usize, s: usize) -> AnnealedPath {
        AnnealedPath::linear(Arc::new(UniformTarget { d, s }))
    }

    #[test]
    fn zero_rates_always_stay() {
        let g = Arr::zeros(vec![3, 2]);
        let dist = step_distribution(&g, 0.25);
        assert_eq!(dist.stay, 1.0);
        assert!(dist.flip_probs.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn single_rate_splits_mass() {
        let mut g = Arr::zeros(vec![1, 2]);
        g.data[1] = 2.0; // flip 0 -> 1 at rate 2
        let dist = step_distribution(&g, 0.1);
        assert!((dist.flip_probs.data[1] - 0.2).abs() < 1e-15);
        assert!((dist.stay - 0.8).abs() < 1e-15);
    }

    #[test]
    fn oversized_rate_clamps_and_renormalises() {
        let mut g = Arr::zeros(vec![1, 2]);
        g.data[1] = 5.0;
        let dist = step_distribution(&g, 0.3); // raw stay = -0.5
        assert_eq!(dist.stay, 0.0);
        assert!((dist.flip_probs.data[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let g = Arr::new(vec![4, 2], (0..8).map(|_| rng.random_range(-3.0..6.0)).collect());
            for dt in [0.01, 0.2, 0.9] {
                let dist = step_distribution(&g, dt);
                let total: f64 = dist.stay + dist.flip_probs.data.iter().sum::<f64>();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(dist.stay >= 0.0);
                assert!(dist.flip_probs.data.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn euler_step_changes_at_most_one_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Arr::zeros(vec![5, 2]);
        for i in 0..5 {
            g.data[i * 2] = 1.5;
            g.data[i * 2 + 1] = 1.5;
        }
        let x = DiscreteState::new(vec![0, 1, 0, 1, 0]);
        for _ in 0..100 {
            let (y, _) = euler_step(&g, &x, 0.2, &mut rng);
            let diff = x.tokens.iter().zip(&y.tokens).filter(|(a, b)| a != b).count();
            assert!(diff <= 1);
        }
    }

    #[test]
    fn zero_model_final_marginals_are_uniform() {
        let model = ZeroRates { d: 8, s: 2 };
        let path = uniform_path(8, 2);
        let grid = TimeGrid::new(16).unwrap();
        let trajs = simulate(&model, &path, &grid, 4096, 11, 1);
        let mut ones = vec![0usize; 8];
        for t in &trajs {
            for (i, &b) in t.final_state().tokens.iter().enumerate() {
                ones[i] += b as usize;
            }
        }
        // binomial(4096, 0.5): 3 standard errors ~ 96
        let se3 = 3.0 * (4096.0f64 * 0.25).sqrt();
        for (i, &c) in ones.iter().enumerate() {
            assert!(
                (c as f64 - 2048.0).abs() < se3,
                "bit {i}: {c} ones out of 4096"
            );
        }
    }

    #[test]
    fn flat_target_zero_model_has_zero_weights() {
        let model = ZeroRates { d: 4, s: 2 };
        let path = uniform_path(4, 2);
        let grid = TimeGrid::new(8).unwrap();
        for t in simulate(&model, &path, &grid, 32, 5, 1) {
            assert_eq!(t.log_weight, 0.0);
            assert!(t.xis.iter().all(|&v| v == 0.0));
            assert!(t.jumps.is_empty());
        }
    }

    #[test]
    fn single_step_grid_runs_one_euler_step() {
        let model = ZeroRates { d: 3, s: 2 };
        let path = uniform_path(3, 2);
        let grid = TimeGrid::new(1).unwrap();
        let trajs = simulate(&model, &path, &grid, 4, 9, 1);
        for t in &trajs {
            assert_eq!(t.states.len(), 2);
            assert_eq!(t.xis.len(), 2);
        }
    }

    /// Constant single-flip rate: empirical flip count over K steps matches
    /// K * r * dt within 3 standard errors.
    #[test]
    fn expected_jump_count_tracks_total_rate() {
        struct ConstRate(f64);
        impl RateModel for ConstRate {
            fn dims(&self) -> (usize, usize) {
                (1, 2)
            }
            fn g_values(&self, _t: f64, x: &DiscreteState) -> Arr {
                let mut g = Arr::zeros(vec![1, 2]);
                g.data[(1 - x.tokens[0]) as usize] = self.0;
                g
            }
        }
        let r = 2.0;
        let model = ConstRate(r);
        let path = uniform_path(1, 2);
        let k = 32;
        let grid = TimeGrid::new(k).unwrap();
        let count = 2000;
        let trajs = simulate(&model, &path, &grid, count, 21, 1);
        let total_jumps: usize = trajs.iter().map(|t| t.jumps.len()).sum();
        let p = (r / k as f64).min(1.0);
        let expect = count as f64 * k as f64 * p;
        let sd = (count as f64 * k as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (total_jumps as f64 - expect).abs() < 3.0 * sd,
            "jumps {total_jumps} vs {expect} +- {sd}"
        );
    }

    #[test]
    fn threaded_simulation_is_identical_to_sequential() {
        let q = QuadraticBinaryTarget::new(
            Arr::matrix(3, 3, vec![0.0, 0.3, 0.0, 0.3, 0.0, -0.2, 0.0, -0.2, 0.0]),
            vec![0.5, -0.5, 0.2],
        )
        .unwrap();
        let path = AnnealedPath::linear(Arc::new(q));
        struct Drift;
        impl RateModel for Drift {
            fn dims(&self) -> (usize, usize) {
                (3, 2)
            }
            fn g_values(&self, t: f64, x: &DiscreteState) -> Arr {
                let mut g = Arr::zeros(vec![3, 2]);
                for i in 0..3 {
                    g.data[i * 2 + (1 - x.tokens[i]) as usize] = 0.5 + t;
                }
                g
            }
        }
        let grid = TimeGrid::new(8).unwrap();
        let a = simulate(&Drift, &path, &grid, 17, 33, 1);
        let b = simulate(&Drift, &path, &grid, 17, 33, 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.states.last(), y.states.last());
            assert_eq!(x.log_weight.to_bits(), y.log_weight.to_bits());
        }
    }
}
