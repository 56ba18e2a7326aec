//! Combinatorial optimisation as sampling: maximum-independent-set and
//! maximum-cut energies in quadratic bit form, random graph generators,
//! inverse-temperature annealing, feasibility post-processing, exact
//! oracles for small instances, and the sample-(refine-)select solver.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{self, BoundModel, ZeroRates};
use crate::lenet::{legf_bias, LeNet, NetworkConfig, Variant};
use crate::path::{AnnealedPath, Schedule, TimeGrid};
use crate::targets::{DiscreteState, QuadraticBinaryTarget};
use crate::tensor::{adamw_step, AdamW, Arr, ParamStore, StepOutcome};
use crate::train::{self, ReplayBuffer};
use crate::{Error, Result};

/// Simple undirected graph.
#[derive(Clone, Debug)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub adj: Vec<Vec<usize>>,
}

impl Graph {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        let mut seen = std::collections::HashSet::new();
        let mut normalized = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Domain(format!("edge ({a},{b}) out of range")));
            }
            if a == b {
                return Err(Error::Domain(format!("self-loop at {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Domain(format!("duplicate edge {e:?}")));
            }
            normalized.push(e);
            adj[a].push(b);
            adj[b].push(a);
        }
        for nb in adj.iter_mut() {
            nb.sort_unstable();
        }
        Ok(Graph { n, edges: normalized, adj })
    }

    pub fn complete(n: usize) -> Self {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        Graph::from_edges(n, &edges).unwrap()
    }

    pub fn adjacency_matrix(&self) -> Arr {
        let mut a = Arr::zeros(vec![self.n, self.n]);
        for &(i, j) in &self.edges {
            a.data[i * self.n + j] = 1.0;
            a.data[j * self.n + i] = 1.0;
        }
        a
    }

    pub fn to_json(&self) -> serde_json::Value {
        let edges: Vec<[usize; 2]> = self.edges.iter().map(|&(a, b)| [a, b]).collect();
        serde_json::json!({"n": self.n, "edges": edges})
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct G {
            n: usize,
            edges: Vec<[usize; 2]>,
        }
        let g: G = serde_json::from_value(v.clone())?;
        let edges: Vec<(usize, usize)> = g.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::from_edges(g.n, &edges)
    }
}

/// Write one graph per line as `{"n": .., "edges": [[i,j],..]}`.
pub fn graphs_to_jsonl(graphs: &[Graph]) -> String {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&g.to_json().to_string());
        out.push('\n');
    }
    out
}

pub fn graphs_from_jsonl(text: &str) -> Result<Vec<Graph>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Graph::from_json(&serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Mis,
    MaxCut,
}

impl ProblemKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mis" => Ok(ProblemKind::Mis),
            "maxcut" => Ok(ProblemKind::MaxCut),
            other => Err(Error::Config(format!("unknown problem {other}"))),
        }
    }
}

pub const DEFAULT_MIS_LAMBDA: f64 = 1.0001;

/// `log rho(x) = invT (1^T x - lambda x^T A x / 2)`: independent-set reward
/// with a penalty on every selected edge.
pub fn mis_target(graph: &Graph, lambda: f64, inv_temp: f64) -> Result<QuadraticBinaryTarget> {
    if lambda <= 1.0 {
        return Err(Error::Domain("MIS penalty needs lambda > 1".into()));
    }
    let n = graph.n;
    let a = graph.adjacency_matrix();
    let mut w = Arr::zeros(vec![n, n]);
    for k in 0..n * n {
        w.data[k] = -inv_temp * 0.5 * lambda * a.data[k];
    }
    QuadraticBinaryTarget::new(w, vec![inv_temp; n])
}

/// MaxCut spin energy `E(s) = s^T A s / 4` mapped to bits via `s = 2b - 1`:
/// `W = -invT A`, `h = invT A 1` (constant dropped).
pub fn maxcut_target(graph: &Graph, inv_temp: f64) -> Result<QuadraticBinaryTarget> {
    let n = graph.n;
    let a = graph.adjacency_matrix();
    let mut w = Arr::zeros(vec![n, n]);
    let mut h = vec![0.0; n];
    for i in 0..n {
        let mut rowsum = 0.0;
        for j in 0..n {
            w.data[i * n + j] = -inv_temp * a.data[i * n + j];
            rowsum += a.data[i * n + j];
        }
        h[i] = inv_temp * rowsum;
    }
    QuadraticBinaryTarget::new(w, h)
}

/// Number of cut edges for a binary assignment.
pub fn cut_value(graph: &Graph, x: &DiscreteState) -> usize {
    graph.edges.iter().filter(|&&(i, j)| x.tokens[i] != x.tokens[j]).count()
}

pub fn is_independent_set(graph: &Graph, x: &DiscreteState) -> bool {
    graph.edges.iter().all(|&(i, j)| x.tokens[i] == 0 || x.tokens[j] == 0)
}

pub fn set_size(x: &DiscreteState) -> usize {
    x.tokens.iter().filter(|&&b| b == 1).count()
}

/// Erdos-Renyi graph with n drawn uniformly from `n_range` and edge
/// probability `p`.
pub fn make_er_graph(n_range: (usize, usize), p: f64, rng: &mut impl Rng) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain("edge probability outside [0,1]".into()));
    }
    let n = rng.random_range(n_range.0..=n_range.1);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

/// Barabasi-Albert preferential attachment starting from an m-clique; each
/// new vertex attaches to m distinct existing vertices.
pub fn make_ba_graph(n_range: (usize, usize), m: usize, rng: &mut impl Rng) -> Result<Graph> {
    if m < 1 {
        return Err(Error::Domain("attachment count must be >= 1".into()));
    }
    let n = rng.random_range(n_range.0..=n_range.1);
    if n < m + 1 {
        return Err(Error::Domain(format!("BA graph needs n > m, got n={n}, m={m}")));
    }
    let mut edges = Vec::new();
    // degree-weighted endpoint pool
    let mut pool: Vec<usize> = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            edges.push((i, j));
            pool.push(i);
            pool.push(j);
        }
    }
    if m == 1 {
        pool.push(0);
    }
    for v in m..n {
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < m {
            let pick = pool[rng.random_range(0..pool.len())];
            chosen.insert(pick);
        }
        for &u in &chosen {
            edges.push((u, v));
            pool.push(u);
            pool.push(v);
        }
    }
    Graph::from_edges(n, &edges)
}

/// Scan vertices in ascending order; whenever a kept vertex has selected
/// neighbours, drop them. The result is always an independent set and a
/// kept vertex is never dropped later.
pub fn postprocess_mis(graph: &Graph, x: &DiscreteState) -> DiscreteState {
    let mut out = x.clone();
    for i in 0..graph.n {
        if out.tokens[i] == 1 {
            for &j in &graph.adj[i] {
                if j != i && out.tokens[j] == 1 {
                    out.tokens[j] = 0;
                }
            }
        }
    }
    out
}

/// Exact maximum-independent-set size by branch and bound with a counting
/// bound and max-degree branching. Limited to n <= 30.
pub fn exact_mis(graph: &Graph) -> Result<usize> {
    if graph.n > 30 {
        return Err(Error::Domain(format!("exact MIS oracle capped at 30 vertices, got {}", graph.n)));
    }
    let n = graph.n;
    let mut adj = vec![0u64; n];
    for &(i, j) in &graph.edges {
        adj[i] |= 1 << j;
        adj[j] |= 1 << i;
    }
    fn bb(avail: u64, count: usize, best: &mut usize, adj: &[u64]) {
        if count + avail.count_ones() as usize <= *best {
            return;
        }
        if avail == 0 {
            *best = (*best).max(count);
            return;
        }
        // branch on the highest-degree available vertex
        let mut v = usize::MAX;
        let mut deg = -1i64;
        let mut scan = avail;
        while scan != 0 {
            let u = scan.trailing_zeros() as usize;
            scan &= scan - 1;
            let du = (adj[u] & avail).count_ones() as i64;
            if du > deg {
                deg = du;
                v = u;
            }
        }
        // isolated vertices always join the set
        if deg == 0 {
            *best = (*best).max(count + avail.count_ones() as usize);
            return;
        }
        let bit = 1u64 << v;
        bb(avail & !(adj[v] | bit), count + 1, best, adj);
        bb(avail & !bit, count, best, adj);
    }
    let mut best = 0;
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    bb(full, 0, &mut best, &adj);
    Ok(best)
}

/// Exact maximum cut by enumeration (vertex 0 pinned by the global spin
/// flip symmetry). Limited to n <= 24.
pub fn exact_maxcut(graph: &Graph) -> Result<usize> {
    if graph.n > 24 {
        return Err(Error::Domain(format!("exact MaxCut oracle capped at 24 vertices, got {}", graph.n)));
    }
    let n = graph.n;
    if n == 0 {
        return Ok(0);
    }
    let mut best = 0usize;
    for m in 0..(1u64 << (n - 1)) {
        let mut cut = 0usize;
        for &(i, j) in &graph.edges {
            if ((m >> i) ^ (m >> j)) & 1 == 1 {
                cut += 1;
            }
        }
        best = best.max(cut);
    }
    Ok(best)
}

/// Linear inverse-temperature ramp across training epochs.
pub fn inverse_temperature(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    if epochs <= 1 {
        return end;
    }
    start + (end - start) * epoch as f64 / (epochs - 1) as f64
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub samples: usize,
    pub k_steps: usize,
    pub refine_steps: usize,
    pub inv_temp: f64,
    pub lambda: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            samples: 128,
            k_steps: 32,
            refine_steps: 0,
            inv_temp: 5.0,
            lambda: DEFAULT_MIS_LAMBDA,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub best: DiscreteState,
    /// Best-of-batch objective.
    pub objective: f64,
    /// Mean post-processed objective across the batch; measures the
    /// sampler's typical output rather than its best draw.
    pub mean_objective: f64,
    pub seconds: f64,
}

/// Sample the annealed chain (optionally refining with MH moves at every
/// grid time), make MIS outputs feasible by the removal scan, and report
/// the best-of-batch objective.
pub fn solve(
    kind: ProblemKind,
    graph: &Graph,
    model: Option<(&LeNet, &ParamStore)>,
    opts: &SolveOptions,
) -> Result<SolveOutcome> {
    let started = Instant::now();
    let target: QuadraticBinaryTarget = match kind {
        ProblemKind::Mis => mis_target(graph, opts.lambda, opts.inv_temp)?,
        ProblemKind::MaxCut => maxcut_target(graph, opts.inv_temp)?,
    };
    let path = AnnealedPath::new(std::sync::Arc::new(target), Schedule::Linear, 5.0)?;
    let grid = TimeGrid::new(opts.k_steps)?;

    let bias_holder;
    let trajs = match model {
        Some((net, store)) => {
            bias_holder = legf_bias(graph, net.config.max_dist);
            let bound = BoundModel {
                net,
                store,
                bias: if net.config.variant == Variant::LeGf { Some(&bias_holder) } else { None },
            };
            ctmc::simulate_refined(&bound, &path, &grid, opts.samples, opts.refine_steps, opts.seed, opts.threads)
        }
        None => {
            let zero = ZeroRates { d: graph.n, s: 2 };
            ctmc::simulate_refined(&zero, &path, &grid, opts.samples, opts.refine_steps, opts.seed, opts.threads)
        }
    };

    let mut best: Option<(DiscreteState, f64)> = None;
    let mut total = 0.0;
    for t in &trajs {
        let candidate = t.final_state();
        let (state, objective) = match kind {
            ProblemKind::Mis => {
                let feasible = postprocess_mis(graph, candidate);
                debug_assert!(is_independent_set(graph, &feasible));
                let size = set_size(&feasible) as f64;
                (feasible, size)
            }
            ProblemKind::MaxCut => (candidate.clone(), cut_value(graph, candidate) as f64),
        };
        total += objective;
        if best.as_ref().map(|(_, b)| objective > *b).unwrap_or(true) {
            best = Some((state, objective));
        }
    }
    let (best, objective) = best.ok_or_else(|| Error::Domain("no samples drawn".into()))?;
    if kind == ProblemKind::Mis {
        assert!(is_independent_set(graph, &best), "post-processing must yield a feasible set");
    }
    Ok(SolveOutcome {
        best,
        objective,
        mean_objective: total / trajs.len() as f64,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphSource {
    Er { p: f64 },
    Ba { m: usize },
}

impl GraphSource {
    pub fn generate(&self, n_range: (usize, usize), rng: &mut impl Rng) -> Result<Graph> {
        match self {
            GraphSource::Er { p } => make_er_graph(n_range, *p, rng),
            GraphSource::Ba { m } => make_ba_graph(n_range, *m, rng),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmortizedTrainConfig {
    pub problem: ProblemKind,
    pub n_range: (usize, usize),
    pub source: GraphSource,
    pub epochs: usize,
    pub outer_batch: usize,
    pub inner_steps: usize,
    pub inner_batch: usize,
    pub k_steps: usize,
    pub lambda: f64,
    pub invt_start: f64,
    pub invt_end: f64,
    pub optimizer: AdamW,
    pub seed: u64,
    pub threads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for AmortizedTrainConfig {
    fn default() -> Self {
        AmortizedTrainConfig {
            problem: ProblemKind::Mis,
            n_range: (16, 20),
            source: GraphSource::Er { p: 0.25 },
            epochs: 150,
            outer_batch: 16,
            inner_steps: 20,
            inner_batch: 8,
            k_steps: 16,
            lambda: DEFAULT_MIS_LAMBDA,
            invt_start: 0.1,
            invt_end: 5.0,
            optimizer: AdamW { lr: 1e-3, ..Default::default() },
            seed: 0,
            threads: 1,
            hidden: 32,
            layers: 2,
            heads: 2,
        }
    }
}

/// Train a graph-conditioned sampler across random instances with the
/// inverse temperature annealed over epochs. Each epoch draws one graph,
/// simulates under the frozen model, refreshes the control variates, and
/// takes inner gradient steps on that epoch's samples (samples from other
/// graphs are not reusable: the conditioning changes).
pub fn train_amortized(cfg: &AmortizedTrainConfig) -> Result<(LeNet, ParamStore, Vec<f64>)> {
    let net_cfg = NetworkConfig {
        variant: Variant::LeGf,
        d: cfg.n_range.1,
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
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let inv_temp = inverse_temperature(epoch, cfg.epochs, cfg.invt_start, cfg.invt_end);
        let graph = cfg.source.generate(cfg.n_range, &mut rng)?;
        let bias = legf_bias(&graph, net.config.max_dist);
        let target = match cfg.problem {
            ProblemKind::Mis => mis_target(&graph, cfg.lambda, inv_temp)?,
            ProblemKind::MaxCut => maxcut_target(&graph, inv_temp)?,
        };
        let path = AnnealedPath::new(std::sync::Arc::new(target), Schedule::Linear, 5.0)?;

        let (ct, mut buffer) = {
            let frozen = BoundModel { net: &net, store: &store, bias: Some(&bias) };
            let trajs = ctmc::simulate(
                &frozen,
                &path,
                &grid,
                cfg.outer_batch,
                cfg.seed.wrapping_add(1000 + epoch as u64),
                cfg.threads,
            );
            // annealed temperatures put p_t far from the chain's own
            // marginals early on; the importance-weighted estimate stays
            // consistent there
            let ct = train::estimate_ct_weighted_from_trajectories(&grid, &trajs);
            let mut buffer = ReplayBuffer::new(cfg.outer_batch * grid.len());
            buffer.push_trajectories(&trajs);
            (ct, buffer)
        };
        let _ = &mut buffer;

        let mut acc = 0.0;
        let mut n = 0usize;
        for _ in 0..cfg.inner_steps {
            let batch = buffer.sample(cfg.inner_batch, &mut rng);
            let (tape, loss) = train::loss_batch(&net, &store, &path, &grid, &batch, &ct, Some(&bias))?;
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                continue;
            }
            let grads = tape.backward(loss)?;
            if adamw_step(&mut store, &grads, &cfg.optimizer) == StepOutcome::Applied {
                acc += value;
                n += 1;
            }
        }
        losses.push(if n > 0 { acc / n as f64 } else { f64::NAN });
    }
    Ok((net, store, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Target;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mis_target_on_empty_graph_rewards_every_vertex() {
        let g = Graph::from_edges(4, &[]).unwrap();
        let t = mis_target(&g, DEFAULT_MIS_LAMBDA, 2.0).unwrap();
        let all = DiscreteState::new(vec![1; 4]);
        assert!((t.log_unnorm(&all) - 2.0 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn mis_single_edge_penalty() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let t = mis_target(&g, DEFAULT_MIS_LAMBDA, 1.0).unwrap();
        let both = DiscreteState::new(vec![1, 1]);
        assert!((t.log_unnorm(&both) - (2.0 - 1.0001)).abs() < 1e-12);
    }

    #[test]
    fn mis_rejects_non_penalising_lambda() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        assert!(mis_target(&g, 1.0, 1.0).is_err());
    }

    #[test]
    fn combinatorial_ratios_match_generic_evaluation() {
        let mut r = rng(1);
        for _ in 0..5 {
            let g = make_er_graph((12, 12), 0.3, &mut r).unwrap();
            for target in [mis_target(&g, 1.0001, 1.7).unwrap(), maxcut_target(&g, 1.3).unwrap()] {
                let x = DiscreteState::new((0..12).map(|_| r.random_range(0..2u8)).collect());
                let fast = target.neighbor_log_ratios(&x);
                let base = target.log_unnorm(&x);
                for i in 0..12 {
                    let brute = target.log_unnorm(&x.flip(i)) - base;
                    let got = fast.at(i, 1 - x.tokens[i] as usize);
                    assert!((got - brute).abs() < 1e-10, "dim {i}: {got} vs {brute}");
                }
            }
        }
    }

    #[test]
    fn maxcut_energy_of_spin_configurations() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let t = maxcut_target(&g, 1.0).unwrap();
        // opposite spins cut the edge: E = -1/4 * 2, equal spins E = +1/2
        let cut = DiscreteState::new(vec![0, 1]);
        let uncut = DiscreteState::new(vec![1, 1]);
        assert_eq!(cut_value(&g, &cut), 1);
        assert_eq!(cut_value(&g, &uncut), 0);
        // log rho differs by invT * (E_uncut - E_cut) = 1 * (1/2 + 1/2) = 1... via ratios
        let diff = t.log_unnorm(&cut) - t.log_unnorm(&uncut);
        assert!((diff - 1.0).abs() < 1e-12, "cut states must score higher: {diff}");
    }

    #[test]
    fn maxcut_argmin_energy_attains_enumerated_optimum() {
        let mut r = rng(2);
        let g = make_er_graph((10, 10), 0.4, &mut r).unwrap();
        let t = maxcut_target(&g, 1.0).unwrap();
        let mut best_logrho = f64::NEG_INFINITY;
        let mut best_cut = 0;
        for idx in 0..1usize << 10 {
            let x = DiscreteState::from_index(idx, 10, 2);
            let lr = t.log_unnorm(&x);
            if lr > best_logrho {
                best_logrho = lr;
                best_cut = cut_value(&g, &x);
            }
        }
        assert_eq!(best_cut, exact_maxcut(&g).unwrap());
    }

    #[test]
    fn er_edge_probability_extremes() {
        let mut r = rng(3);
        let empty = make_er_graph((8, 8), 0.0, &mut r).unwrap();
        assert!(empty.edges.is_empty());
        let full = make_er_graph((8, 8), 1.0, &mut r).unwrap();
        assert_eq!(full.edges.len(), 8 * 7 / 2);
    }

    #[test]
    fn ba_edge_count_follows_seeding_convention() {
        let mut r = rng(4);
        for _ in 0..5 {
            let g = make_ba_graph((10, 14), 2, &mut r).unwrap();
            assert_eq!(g.edges.len(), 1 + 2 * (g.n - 2));
        }
    }

    #[test]
    fn postprocess_resolves_triangle() {
        let g = Graph::from_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let fixed = postprocess_mis(&g, &DiscreteState::new(vec![1, 1, 1]));
        assert_eq!(fixed.tokens, vec![1, 0, 0]);
    }

    #[test]
    fn postprocess_keeps_independent_sets() {
        let g = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let x = DiscreteState::new(vec![1, 0, 1, 0]);
        assert_eq!(postprocess_mis(&g, &x), x);
        let empty = Graph::from_edges(3, &[]).unwrap();
        let y = DiscreteState::new(vec![1, 1, 1]);
        assert_eq!(postprocess_mis(&empty, &y), y);
    }

    #[test]
    fn postprocess_always_yields_independent_sets() {
        let mut r = rng(5);
        for _ in 0..20 {
            let g = make_er_graph((10, 16), 0.3, &mut r).unwrap();
            let x = DiscreteState::new((0..g.n).map(|_| r.random_range(0..2u8)).collect());
            assert!(is_independent_set(&g, &postprocess_mis(&g, &x)));
        }
    }

    #[test]
    fn exact_mis_on_small_graphs() {
        let triangle = Graph::from_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        assert_eq!(exact_mis(&triangle).unwrap(), 1);
        let path3 = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(exact_mis(&path3).unwrap(), 2);
        let empty = Graph::from_edges(5, &[]).unwrap();
        assert_eq!(exact_mis(&empty).unwrap(), 5);
    }

    #[test]
    fn exact_mis_matches_brute_force() {
        let mut r = rng(6);
        for _ in 0..10 {
            let g = make_er_graph((8, 12), 0.3, &mut r).unwrap();
            let mut brute = 0;
            for idx in 0..1usize << g.n {
                let x = DiscreteState::from_index(idx, g.n, 2);
                if is_independent_set(&g, &x) {
                    brute = brute.max(set_size(&x));
                }
            }
            assert_eq!(exact_mis(&g).unwrap(), brute);
        }
    }

    #[test]
    fn mis_target_concentrates_on_maximum_sets_at_low_temperature() {
        let mut r = rng(7);
        for _ in 0..5 {
            let g = make_er_graph((8, 10), 0.3, &mut r).unwrap();
            let t = mis_target(&g, DEFAULT_MIS_LAMBDA, 60.0).unwrap();
            let mut best = (f64::NEG_INFINITY, 0usize);
            for idx in 0..1usize << g.n {
                let x = DiscreteState::from_index(idx, g.n, 2);
                let lr = t.log_unnorm(&x);
                if lr > best.0 {
                    best = (lr, idx);
                }
            }
            let argmax = DiscreteState::from_index(best.1, g.n, 2);
            assert!(is_independent_set(&g, &argmax));
            assert_eq!(set_size(&argmax), exact_mis(&g).unwrap());
        }
    }

    #[test]
    fn solve_on_empty_graph_returns_full_vertex_set() {
        // the annealed target rewards every vertex; the refinement moves
        // drive the chain to the all-ones state
        let g = Graph::from_edges(6, &[]).unwrap();
        let opts = SolveOptions { samples: 8, k_steps: 8, refine_steps: 3, ..Default::default() };
        let out = solve(ProblemKind::Mis, &g, None, &opts).unwrap();
        assert_eq!(out.objective, 6.0);
        assert_eq!(out.best.tokens, vec![1; 6]);
    }

    #[test]
    fn refinement_does_not_hurt_the_objective_on_average() {
        let mut r = rng(8);
        let mut plain_total = 0.0;
        let mut refined_total = 0.0;
        for i in 0..6 {
            let g = make_er_graph((10, 12), 0.25, &mut r).unwrap();
            let base = SolveOptions { samples: 16, k_steps: 8, seed: 40 + i, ..Default::default() };
            let refined = SolveOptions { refine_steps: 3, ..base.clone() };
            plain_total += solve(ProblemKind::Mis, &g, None, &base).unwrap().objective;
            refined_total += solve(ProblemKind::Mis, &g, None, &refined).unwrap().objective;
        }
        assert!(
            refined_total >= plain_total,
            "refined {refined_total} vs plain {plain_total}"
        );
    }

    #[test]
    fn graph_jsonl_round_trip() {
        let mut r = rng(9);
        let graphs: Vec<Graph> = (0..3).map(|_| make_er_graph((5, 8), 0.4, &mut r).unwrap()).collect();
        let text = graphs_to_jsonl(&graphs);
        let back = graphs_from_jsonl(&text).unwrap();
        assert_eq!(back.len(), graphs.len());
        for (a, b) in graphs.iter().zip(&back) {
            assert_eq!(a.n, b.n);
            assert_eq!(a.edges, b.edges);
        }
    }

    #[test]
    fn inverse_temperature_ramps_linearly() {
        assert_eq!(inverse_temperature(0, 11, 0.1, 5.0), 0.1);
        assert_eq!(inverse_temperature(10, 11, 0.1, 5.0), 5.0);
        let mid = inverse_temperature(5, 11, 0.1, 5.0);
        assert!((mid - 2.55).abs() < 1e-12);
    }
}
