//! Python bindings exposing the sampler's main types and operations:
//! target construction, training, chain simulation with importance weights,
//! ESS / log-partition estimation, exact enumeration for small spaces, and
//! the combinatorial MIS solver.

use std::path::Path;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dnfs_core::combopt::{self, Graph, ProblemKind, SolveOptions};
use dnfs_core::ctmc::{self, BoundModel};
use dnfs_core::infer;
use dnfs_core::lenet::{LeNet, NetworkConfig, Variant};
use dnfs_core::mcmc::gibbs_sweep;
use dnfs_core::oracle::ExactEnumeration;
use dnfs_core::path::{AnnealedPath, Schedule, TimeGrid, DEFAULT_RATIO_CLIP};
use dnfs_core::targets::{
    make_ising, DiscreteState, GrayCode2DTarget, QuadraticBinaryTarget, Target, Toy2d,
};
use dnfs_core::tensor::{load_checkpoint, save_checkpoint, AdamW, Arr, ParamStore};
use dnfs_core::train::{train_loop, TrainConfig};

fn err(e: dnfs_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[derive(Clone)]
enum TargetSpec {
    Ising { grid: usize, sigma: f64 },
    Quadratic { d: usize, w: Vec<f64>, h: Vec<f64> },
    Gray { density: String },
}

impl TargetSpec {
    fn build(&self) -> PyResult<Arc<dyn Target>> {
        match self {
            TargetSpec::Ising { grid, sigma } => {
                Ok(Arc::new(make_ising(*grid, *sigma).map_err(err)?))
            }
            TargetSpec::Quadratic { d, w, h } => Ok(Arc::new(
                QuadraticBinaryTarget::new(Arr::matrix(*d, *d, w.clone()), h.clone()).map_err(err)?,
            )),
            TargetSpec::Gray { density } => Ok(Arc::new(GrayCode2DTarget::new(
                Toy2d::from_name(density).map_err(err)?,
            ))),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            TargetSpec::Ising { grid, sigma } => {
                serde_json::json!({"kind": "ising", "D": grid, "sigma": sigma})
            }
            TargetSpec::Quadratic { d, w, h } => {
                serde_json::json!({"kind": "quadratic", "d": d, "w": w, "h": h})
            }
            TargetSpec::Gray { density } => serde_json::json!({"kind": "gray", "density": density}),
        }
    }

    fn from_json(v: &serde_json::Value) -> PyResult<Self> {
        match v["kind"].as_str() {
            Some("ising") => Ok(TargetSpec::Ising {
                grid: v["D"].as_u64().unwrap_or(4) as usize,
                sigma: v["sigma"].as_f64().unwrap_or(0.1),
            }),
            Some("quadratic") => {
                let d = v["d"].as_u64().unwrap_or(0) as usize;
                let w: Vec<f64> = serde_json::from_value(v["w"].clone())
                    .map_err(|e| PyValueError::new_err(e.to_string()))?;
                let h: Vec<f64> = serde_json::from_value(v["h"].clone())
                    .map_err(|e| PyValueError::new_err(e.to_string()))?;
                Ok(TargetSpec::Quadratic { d, w, h })
            }
            Some("gray") => Ok(TargetSpec::Gray {
                density: v["density"].as_str().unwrap_or("rings").to_string(),
            }),
            other => Err(PyValueError::new_err(format!("unknown target kind {other:?}"))),
        }
    }
}

/// An unnormalised binary target distribution.
#[pyclass(name = "Target", from_py_object)]
#[derive(Clone)]
pub struct PyTarget {
    spec: TargetSpec,
}

#[pymethods]
impl PyTarget {
    /// Circular lattice Ising model with side length `grid` and coupling `sigma`.
    #[staticmethod]
    fn ising(grid: usize, sigma: f64) -> PyResult<Self> {
        make_ising(grid, sigma).map_err(err)?;
        Ok(PyTarget { spec: TargetSpec::Ising { grid, sigma } })
    }

    /// Quadratic target `log rho(x) = x^T W x + h^T x` (W row-major).
    #[staticmethod]
    fn quadratic(w: Vec<f64>, h: Vec<f64>) -> PyResult<Self> {
        let d = h.len();
        QuadraticBinaryTarget::new(Arr::matrix(d, d, w.clone()), h.clone()).map_err(err)?;
        Ok(PyTarget { spec: TargetSpec::Quadratic { d, w, h } })
    }

    /// 32-bit Gray-code quantisation of a named 2-D toy density.
    #[staticmethod]
    fn gray(density: &str) -> PyResult<Self> {
        Toy2d::from_name(density).map_err(err)?;
        Ok(PyTarget { spec: TargetSpec::Gray { density: density.to_string() } })
    }

    /// (d, S) of the state space.
    fn dims(&self) -> PyResult<(usize, usize)> {
        Ok(self.spec.build()?.dims())
    }

    fn log_unnorm(&self, x: Vec<u8>) -> PyResult<f64> {
        Ok(self.spec.build()?.log_unnorm(&DiscreteState::new(x)))
    }

    /// Exact log-partition at path time t (small spaces only).
    fn exact_log_z(&self, t: f64) -> PyResult<f64> {
        let path = AnnealedPath::linear(self.spec.build()?);
        let e = ExactEnumeration::new(&path).map_err(err)?;
        Ok(e.log_z(&path, t))
    }

    /// Long-run Gibbs samples from the target.
    fn gibbs_samples(&self, count: usize, burn_in: usize, thin: usize, seed: u64) -> PyResult<Vec<Vec<u8>>> {
        let target = self.spec.build()?;
        let (d, _) = target.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DiscreteState::zeros(d);
        let mut out = Vec::with_capacity(count);
        let mut sweep = 0usize;
        while out.len() < count {
            gibbs_sweep(target.as_ref(), &mut x, &mut rng);
            if sweep >= burn_in && (sweep - burn_in) % thin.max(1) == 0 {
                out.push(x.tokens.clone());
            }
            sweep += 1;
        }
        Ok(out)
    }
}

/// A trained rate-matrix sampler bound to its annealing path.
#[pyclass(name = "Sampler")]
pub struct PySampler {
    net: LeNet,
    store: ParamStore,
    spec: TargetSpec,
    steps: usize,
    clip: f64,
    seed: u64,
}

impl PySampler {
    fn path(&self) -> PyResult<AnnealedPath> {
        AnnealedPath::new(self.spec.build()?, Schedule::Linear, self.clip).map_err(err)
    }

    fn simulate(&self, num: usize, seed: u64) -> PyResult<Vec<ctmc::Trajectory>> {
        let path = self.path()?;
        let grid = TimeGrid::new(self.steps).map_err(err)?;
        let bound = BoundModel { net: &self.net, store: &self.store, bias: None };
        Ok(ctmc::simulate(&bound, &path, &grid, num, seed, 1))
    }
}

#[pymethods]
impl PySampler {
    /// Chain samples at t = 1 plus their importance log-weights.
    fn sample(&self, num: usize, seed: u64) -> PyResult<(Vec<Vec<u8>>, Vec<f64>)> {
        let trajs = self.simulate(num, seed)?;
        let states = trajs.iter().map(|t| t.final_state().tokens.clone()).collect();
        let weights = ctmc::log_weights(&trajs);
        Ok((states, weights))
    }

    /// Normalised effective sample size over `num` trajectories.
    fn ess(&self, num: usize, seed: u64) -> PyResult<f64> {
        let trajs = self.simulate(num, seed)?;
        infer::ess(&ctmc::log_weights(&trajs)).map_err(err)
    }

    /// Annealed importance estimate of the target log-partition.
    fn log_z_estimate(&self, num: usize, seed: u64) -> PyResult<f64> {
        let trajs = self.simulate(num, seed)?;
        let path = self.path()?;
        infer::estimate_log_z(&trajs, path.log_z0()).map_err(err)
    }

    /// Reverse-chain variational bound: mean negative ELBO per datum.
    fn nll_bound(&self, data: Vec<Vec<u8>>, seed: u64) -> PyResult<f64> {
        let states: Vec<DiscreteState> = data.into_iter().map(DiscreteState::new).collect();
        let path = self.path()?;
        let grid = TimeGrid::new(self.steps).map_err(err)?;
        let bound = BoundModel { net: &self.net, store: &self.store, bias: None };
        Ok(infer::elbo_nll(&bound, &path, &grid, &states, seed).map_err(err)?.mean_nll)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        let extra = serde_json::json!({
            "target": self.spec.json(),
            "network": self.net.config,
            "path": {"schedule": "linear", "steps": self.steps, "clip": self.clip},
            "seed": self.seed,
        });
        save_checkpoint(Path::new(dir), &self.store, &extra).map_err(err)
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let (store, extra) = load_checkpoint(Path::new(dir)).map_err(err)?;
        let network: NetworkConfig = serde_json::from_value(extra["network"].clone())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let spec = TargetSpec::from_json(&extra["target"])?;
        let steps = extra["path"]["steps"].as_u64().unwrap_or(64) as usize;
        let clip = extra["path"]["clip"].as_f64().unwrap_or(DEFAULT_RATIO_CLIP);
        let seed = extra["seed"].as_u64().unwrap_or(0);
        Ok(PySampler { net: LeNet::new(network).map_err(err)?, store, spec, steps, clip, seed })
    }
}

/// Train a locally equivariant transformer sampler for `target`.
#[pyfunction]
#[pyo3(signature = (target, steps=32, epochs=50, hidden=64, layers=2, heads=2,
    outer_batch=16, inner_batch=8, inner_steps=100, lr=1e-3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    target: &PyTarget,
    steps: usize,
    epochs: usize,
    hidden: usize,
    layers: usize,
    heads: usize,
    outer_batch: usize,
    inner_batch: usize,
    inner_steps: usize,
    lr: f64,
    seed: u64,
) -> PyResult<(PySampler, Vec<f64>)> {
    let built = target.spec.build()?;
    let (d, s) = built.dims();
    let config = NetworkConfig {
        variant: Variant::LeTf,
        d,
        s,
        hidden,
        layers,
        heads,
        time_dim: 32,
        max_dist: 8,
    };
    let net = LeNet::new(config).map_err(err)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_params(&mut store, &mut rng).map_err(err)?;
    let path = AnnealedPath::linear(built);
    let grid = TimeGrid::new(steps).map_err(err)?;
    let cfg = TrainConfig {
        outer_batch,
        inner_batch,
        inner_steps,
        epochs,
        optimizer: AdamW { lr, ..Default::default() },
        buffer_factor: 10,
        seed,
        threads: 1,
    };
    let result = train_loop(&net, &mut store, &path, &grid, &cfg, None, None).map_err(err)?;
    let losses = result.metrics.iter().map(|m| m.loss).collect();
    Ok((
        PySampler { net, store, spec: target.spec.clone(), steps, clip: DEFAULT_RATIO_CLIP, seed },
        losses,
    ))
}

/// Normalised effective sample size of a set of log-weights.
#[pyfunction]
fn ess(log_weights: Vec<f64>) -> PyResult<f64> {
    infer::ess(&log_weights).map_err(err)
}

/// Decode 16 Gray-code bits (most significant first) into [lo, hi].
#[pyfunction]
fn gray_decode(bits: Vec<u8>, lo: f64, hi: f64) -> PyResult<f64> {
    if bits.len() != 16 {
        return Err(PyValueError::new_err("expected 16 bits"));
    }
    Ok(dnfs_core::targets::gray_decode(&bits, lo, hi))
}

/// Solve maximum independent set on a graph by annealed sampling with
/// optional locally informed MH refinement. Returns (indicator, size).
#[pyfunction]
#[pyo3(signature = (n, edges, samples=128, steps=32, refine_steps=3, seed=0))]
fn solve_mis(
    n: usize,
    edges: Vec<(usize, usize)>,
    samples: usize,
    steps: usize,
    refine_steps: usize,
    seed: u64,
) -> PyResult<(Vec<u8>, usize)> {
    let graph = Graph::from_edges(n, &edges).map_err(err)?;
    let opts = SolveOptions { samples, k_steps: steps, refine_steps, seed, ..Default::default() };
    let outcome = combopt::solve(ProblemKind::Mis, &graph, None, &opts).map_err(err)?;
    let size = outcome.objective as usize;
    Ok((outcome.best.tokens, size))
}

/// Exact maximum-independent-set size (n <= 30).
#[pyfunction]
fn exact_mis(n: usize, edges: Vec<(usize, usize)>) -> PyResult<usize> {
    let graph = Graph::from_edges(n, &edges).map_err(err)?;
    combopt::exact_mis(&graph).map_err(err)
}

#[pymodule]
fn dnfs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTarget>()?;
    m.add_class::<PySampler>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    m.add_function(wrap_pyfunction!(gray_decode, m)?)?;
    m.add_function(wrap_pyfunction!(solve_mis, m)?)?;
    m.add_function(wrap_pyfunction!(exact_mis, m)?)?;
    Ok(())
}
