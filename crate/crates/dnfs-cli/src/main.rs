//! `dnfs`: train, sample from, and evaluate discrete neural flow samplers,
//! plus drivers for combinatorial optimisation, energy-based-model training,
//! and exact enumeration utilities.
//!
//! Every run directory receives `config.json` (the resolved configuration),
//! `metrics.csv`, and, where applicable, a checkpoint (`manifest.json` +
//! `params.bin`). With a fixed `--seed` and `DNFS_THREADS=1` the outputs are
//! bit-identical across runs.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dnfs_core::combopt::{
    self, exact_maxcut, exact_mis, AmortizedTrainConfig, Graph, GraphSource, ProblemKind,
    SolveOptions,
};
use dnfs_core::ctmc::{self, BoundModel};
use dnfs_core::ebm::{self, EbmTrainConfig};
use dnfs_core::infer::{self, EvalReport};
use dnfs_core::lenet::{LeNet, NetworkConfig, Variant};
use dnfs_core::mcmc::gibbs_sweep;
use dnfs_core::oracle::ExactEnumeration;
use dnfs_core::path::{AnnealedPath, Schedule, TimeGrid, DEFAULT_RATIO_CLIP};
use dnfs_core::targets::{
    make_ising, DiscreteState, GrayCode2DTarget, QuadraticBinaryTarget, Target, Toy2d,
    UniformTarget,
};
use dnfs_core::tensor::{load_checkpoint, save_checkpoint, AdamW, ParamStore};
use dnfs_core::train::{train_loop, TrainConfig};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: i32) {
    INTERRUPTED.store(true, Ordering::Relaxed);
}

fn install_sigint_handler() {
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as extern "C" fn(i32) as usize as libc::sighandler_t);
    }
}

#[derive(Parser)]
#[command(name = "dnfs", version, about = "Discrete neural flow sampler", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a rate matrix for a target distribution.
    Train(TrainArgs),
    /// Simulate the learned chain and export samples with log-weights.
    Sample(SampleArgs),
    /// Importance-sampling evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Train/evaluate the amortised combinatorial solver.
    Combopt(CombOptArgs),
    /// Train an energy-based model with the sampler in the loop.
    Ebm(EbmArgs),
    /// Exact enumeration utilities for small targets.
    Oracle(OracleArgs),
}

#[derive(Args, Clone)]
struct TargetFlags {
    /// Target family: ising | quadratic | gray | uniform.
    #[arg(long)]
    target: Option<String>,
    /// Ising lattice side length.
    #[arg(long)]
    grid: Option<usize>,
    /// Ising coupling strength.
    #[arg(long)]
    sigma: Option<f64>,
    /// JSON file with a quadratic target {d, w, h}.
    #[arg(long)]
    quadratic_file: Option<PathBuf>,
    /// Toy density name for the Gray-code target.
    #[arg(long)]
    density: Option<String>,
    /// Dimension for the uniform target.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    target: TargetFlags,
    /// Network variant: letf | lemlp | leattn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Euler steps K of the time grid.
    #[arg(long)]
    steps: Option<usize>,
    /// Annealing schedule: linear | cosine.
    #[arg(long)]
    schedule: Option<String>,
    /// Upper clip for neighbourhood log-ratios.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    outer_batch: Option<usize>,
    #[arg(long)]
    inner_batch: Option<usize>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of trajectories.
    #[arg(long, default_value_t = 1000)]
    num: usize,
    /// Override the simulation grid size.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write trajectories.jsonl with jump logs.
    #[arg(long, default_value_t = false)]
    trajectories: bool,
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1024)]
    num: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Compare against exact enumeration (small targets only).
    #[arg(long, default_value_t = false)]
    exact: bool,
    /// CSV of held-out states for the reverse-chain NLL bound.
    #[arg(long)]
    nll_data: Option<PathBuf>,
    /// Write the report here as JSON (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CombOptArgs {
    /// mis | maxcut.
    #[arg(long, default_value = "mis")]
    problem: String,
    /// Skip amortised training and evaluate the untrained sampler.
    #[arg(long, default_value_t = false)]
    untrained: bool,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 16)]
    n_lo: usize,
    #[arg(long, default_value_t = 20)]
    n_hi: usize,
    /// Erdos-Renyi edge probability (MIS benchmarks).
    #[arg(long, default_value_t = 0.25)]
    er_p: f64,
    /// Barabasi-Albert attachment count (MaxCut benchmarks).
    #[arg(long, default_value_t = 4)]
    ba_m: usize,
    #[arg(long, default_value_t = 0)]
    refine_steps: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "combopt")]
    out: PathBuf,
}

#[derive(Args)]
struct EbmArgs {
    /// ising | gray.
    #[arg(long, default_value = "ising")]
    task: String,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Toy density for the gray task.
    #[arg(long, default_value = "moons")]
    density: String,
    #[arg(long, default_value_t = 60)]
    rounds: usize,
    #[arg(long, default_value_t = 2000)]
    data_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ebm")]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    target: TargetFlags,
    /// Time on the annealing path.
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    /// Draw this many exact samples and write them as CSV.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Serialisable target description stored in checkpoints and configs.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TargetSpec {
    Ising {
        #[serde(rename = "D")]
        grid: usize,
        sigma: f64,
    },
    Quadratic {
        d: usize,
        w: Vec<f64>,
        h: Vec<f64>,
    },
    Gray {
        density: String,
    },
    Uniform {
        d: usize,
    },
}

impl TargetSpec {
    fn from_flags(flags: &TargetFlags, fallback: Option<&TargetSpec>) -> Result<Self, CliError> {
        let kind = flags
            .target
            .clone()
            .or_else(|| fallback.map(|f| f.kind_name().to_string()))
            .ok_or_else(|| CliError::usage("no target specified (use --target)"))?;
        match kind.as_str() {
            "ising" => {
                let fb = match fallback {
                    Some(TargetSpec::Ising { grid, sigma }) => Some((*grid, *sigma)),
                    _ => None,
                };
                let grid = flags.grid.or(fb.map(|f| f.0)).unwrap_or(4);
                let sigma = flags.sigma.or(fb.map(|f| f.1)).unwrap_or(0.1);
                Ok(TargetSpec::Ising { grid, sigma })
            }
            "quadratic" => {
                if let Some(file) = &flags.quadratic_file {
                    let v: serde_json::Value =
                        serde_json::from_str(&std::fs::read_to_string(file).map_err(CliError::usage_io)?)
                            .map_err(|e| CliError::usage(format!("bad quadratic file: {e}")))?;
                    let q = QuadraticBinaryTarget::from_json(&v)
                        .map_err(|e| CliError::usage(format!("bad quadratic target: {e}")))?;
                    Ok(TargetSpec::Quadratic { d: q.d(), w: q.w.data, h: q.h })
                } else if let Some(TargetSpec::Quadratic { .. }) = fallback {
                    Ok(fallback.unwrap().clone())
                } else {
                    Err(CliError::usage("quadratic target needs --quadratic-file"))
                }
            }
            "gray" => {
                let density = flags
                    .density
                    .clone()
                    .or(match fallback {
                        Some(TargetSpec::Gray { density }) => Some(density.clone()),
                        _ => None,
                    })
                    .unwrap_or_else(|| "rings".to_string());
                Toy2d::from_name(&density).map_err(|e| CliError::usage(e.to_string()))?;
                Ok(TargetSpec::Gray { density })
            }
            "uniform" => {
                let d = flags
                    .dim
                    .or(match fallback {
                        Some(TargetSpec::Uniform { d }) => Some(*d),
                        _ => None,
                    })
                    .ok_or_else(|| CliError::usage("uniform target needs --dim"))?;
                Ok(TargetSpec::Uniform { d })
            }
            other => Err(CliError::usage(format!("unknown target {other}"))),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            TargetSpec::Ising { .. } => "ising",
            TargetSpec::Quadratic { .. } => "quadratic",
            TargetSpec::Gray { .. } => "gray",
            TargetSpec::Uniform { .. } => "uniform",
        }
    }

    fn build(&self) -> Result<Arc<dyn Target>, CliError> {
        match self {
            TargetSpec::Ising { grid, sigma } => Ok(Arc::new(
                make_ising(*grid, *sigma).map_err(|e| CliError::usage(e.to_string()))?,
            )),
            TargetSpec::Quadratic { d, w, h } => Ok(Arc::new(
                QuadraticBinaryTarget::new(
                    dnfs_core::tensor::Arr::matrix(*d, *d, w.clone()),
                    h.clone(),
                )
                .map_err(|e| CliError::usage(e.to_string()))?,
            )),
            TargetSpec::Gray { density } => Ok(Arc::new(GrayCode2DTarget::new(
                Toy2d::from_name(density).map_err(|e| CliError::usage(e.to_string()))?,
            ))),
            TargetSpec::Uniform { d } => Ok(Arc::new(UniformTarget { d: *d, s: 2 })),
        }
    }
}

/// Fully resolved run configuration, echoed verbatim into the run directory.
#[derive(Clone, Serialize, Deserialize)]
struct RunConfig {
    target: TargetSpec,
    network: NetworkConfig,
    path: PathSpec,
    train: TrainSpec,
    seed: u64,
}

#[derive(Clone, Serialize, Deserialize)]
struct PathSpec {
    schedule: String,
    steps: usize,
    clip: f64,
}

#[derive(Clone, Serialize, Deserialize)]
struct TrainSpec {
    epochs: usize,
    outer_batch: usize,
    inner_batch: usize,
    inner_steps: usize,
    lr: f64,
    weight_decay: f64,
}

struct CliError {
    message: String,
    usage: bool,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { message: msg.into(), usage: true }
    }
    fn usage_io(e: std::io::Error) -> Self {
        CliError { message: e.to_string(), usage: true }
    }
    fn runtime(msg: impl Into<String>) -> Self {
        CliError { message: msg.into(), usage: false }
    }
}

impl From<dnfs_core::Error> for CliError {
    fn from(e: dnfs_core::Error) -> Self {
        match &e {
            dnfs_core::Error::Config(_) | dnfs_core::Error::Domain(_) => CliError::usage(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

fn threads_from_env() -> usize {
    std::env::var("DNFS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

fn main() {
    install_sigint_handler();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Combopt(args) => cmd_combopt(args),
        Command::Ebm(args) => cmd_ebm(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    if let Err(e) = result {
        let kind = if e.usage { "usage" } else { "runtime" };
        eprintln!("{}", serde_json::json!({"error": e.message, "kind": kind}));
        std::process::exit(if e.usage { 2 } else { 1 });
    }
}

fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let file_cfg: Option<RunConfig> = match &args.config {
        Some(path) => Some(
            serde_json::from_str(&std::fs::read_to_string(path).map_err(CliError::usage_io)?)
                .map_err(|e| CliError::usage(format!("bad config file: {e}")))?,
        ),
        None => None,
    };
    let target = TargetSpec::from_flags(&args.target, file_cfg.as_ref().map(|c| &c.target))?;
    let variant = match &args.variant {
        Some(v) => Variant::from_name(v)?,
        None => file_cfg.as_ref().map(|c| c.network.variant).unwrap_or(Variant::LeTf),
    };
    let (d, _) = target.build()?.dims();
    let mut network = match &file_cfg {
        Some(c) => c.network.clone(),
        None => NetworkConfig::new(variant, d, 2),
    };
    network.variant = variant;
    network.d = d;
    network.s = 2;
    if let Some(h) = args.hidden {
        network.hidden = h;
    }
    if let Some(l) = args.layers {
        network.layers = l;
    }
    if let Some(h) = args.heads {
        network.heads = h;
    }
    let path = PathSpec {
        schedule: args
            .schedule
            .clone()
            .or(file_cfg.as_ref().map(|c| c.path.schedule.clone()))
            .unwrap_or_else(|| "linear".into()),
        steps: args.steps.or(file_cfg.as_ref().map(|c| c.path.steps)).unwrap_or(64),
        clip: args.clip.or(file_cfg.as_ref().map(|c| c.path.clip)).unwrap_or(DEFAULT_RATIO_CLIP),
    };
    let train = TrainSpec {
        epochs: args.epochs.or(file_cfg.as_ref().map(|c| c.train.epochs)).unwrap_or(200),
        outer_batch: args.outer_batch.or(file_cfg.as_ref().map(|c| c.train.outer_batch)).unwrap_or(32),
        inner_batch: args.inner_batch.or(file_cfg.as_ref().map(|c| c.train.inner_batch)).unwrap_or(16),
        inner_steps: args.inner_steps.or(file_cfg.as_ref().map(|c| c.train.inner_steps)).unwrap_or(100),
        lr: args.lr.or(file_cfg.as_ref().map(|c| c.train.lr)).unwrap_or(1e-3),
        weight_decay: args
            .weight_decay
            .or(file_cfg.as_ref().map(|c| c.train.weight_decay))
            .unwrap_or(0.0),
    };
    let seed = args.seed.or(file_cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    Ok(RunConfig { target, network, path, train, seed })
}

fn build_path(cfg: &RunConfig) -> Result<(AnnealedPath, TimeGrid), CliError> {
    let target = cfg.target.build()?;
    let schedule = Schedule::from_name(&cfg.path.schedule)?;
    let path = AnnealedPath::new(target, schedule, cfg.path.clip)?;
    let grid = TimeGrid::new(cfg.path.steps)?;
    Ok((path, grid))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&args)?;
    let (path, grid) = build_path(&cfg)?;
    let net = LeNet::new(cfg.network.clone())?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init_params(&mut store, &mut rng)?;

    let train_cfg = TrainConfig {
        outer_batch: cfg.train.outer_batch,
        inner_batch: cfg.train.inner_batch,
        inner_steps: cfg.train.inner_steps,
        epochs: cfg.train.epochs,
        optimizer: AdamW { lr: cfg.train.lr, weight_decay: cfg.train.weight_decay, ..Default::default() },
        buffer_factor: 10,
        seed: cfg.seed,
        threads: threads_from_env(),
    };

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let result = train_loop(&net, &mut store, &path, &grid, &train_cfg, None, Some(&INTERRUPTED))?;

    let mut csv = String::from("epoch,loss,mean_abs_ct,ess\n");
    for m in &result.metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.loss, m.mean_abs_ct, m.ess));
    }
    std::fs::write(args.out.join("metrics.csv"), csv)?;

    let extra = serde_json::json!({
        "target": cfg.target,
        "network": cfg.network,
        "path": cfg.path,
        "seed": cfg.seed,
    });
    save_checkpoint(&args.out.join("ckpt"), &store, &extra)?;

    if result.interrupted {
        return Err(CliError::runtime("interrupted; checkpoint and metrics were written"));
    }
    println!(
        "{}",
        serde_json::json!({
            "epochs": result.metrics.len(),
            "final_loss": result.metrics.last().map(|m| m.loss),
            "skipped_steps": result.skipped_steps,
            "checkpoint": args.out.join("ckpt"),
        })
    );
    Ok(())
}

struct LoadedModel {
    net: LeNet,
    store: ParamStore,
    path: AnnealedPath,
    grid: TimeGrid,
    seed: u64,
}

fn load_model(ckpt: &Path) -> Result<LoadedModel, CliError> {
    if !ckpt.join("manifest.json").exists() {
        return Err(CliError::usage(format!("missing checkpoint at {}", ckpt.display())));
    }
    let (store, extra) = load_checkpoint(ckpt)?;
    let network: NetworkConfig = serde_json::from_value(extra["network"].clone())?;
    let target: TargetSpec = serde_json::from_value(extra["target"].clone())?;
    let path_spec: PathSpec = serde_json::from_value(extra["path"].clone())?;
    let seed = extra["seed"].as_u64().unwrap_or(0);
    let path = AnnealedPath::new(
        target.build()?,
        Schedule::from_name(&path_spec.schedule)?,
        path_spec.clip,
    )?;
    let grid = TimeGrid::new(path_spec.steps)?;
    let _ = target;
    let net = LeNet::new(network)?;
    Ok(LoadedModel { net, store, path, grid, seed })
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let model = load_model(&args.ckpt)?;
    let grid = match args.steps {
        Some(k) => TimeGrid::new(k)?,
        None => model.grid.clone(),
    };
    let seed = args.seed.unwrap_or(model.seed.wrapping_add(7_000_000));
    let bound = BoundModel { net: &model.net, store: &model.store, bias: None };
    let trajs = ctmc::simulate(&bound, &model.path, &grid, args.num, seed, threads_from_env());

    std::fs::create_dir_all(&args.out)?;
    let (d, _) = model.path.dims();
    let mut samples = (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    samples.push('\n');
    let mut weights = String::from("log_weight\n");
    for t in &trajs {
        let row: Vec<String> = t.final_state().tokens.iter().map(|v| v.to_string()).collect();
        samples.push_str(&row.join(","));
        samples.push('\n');
        weights.push_str(&format!("{}\n", t.log_weight));
    }
    std::fs::write(args.out.join("samples.csv"), samples)?;
    std::fs::write(args.out.join("weights.csv"), weights)?;
    if args.trajectories {
        std::fs::write(args.out.join("trajectories.jsonl"), ctmc::trajectories_to_jsonl(&trajs))?;
    }
    println!(
        "{}",
        serde_json::json!({"samples": trajs.len(), "dir": args.out, "ess": infer::ess(&ctmc::log_weights(&trajs)).ok()})
    );
    Ok(())
}

fn read_states_csv(path: &Path, d: usize) -> Result<Vec<DiscreteState>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::usage_io)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with('x') {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<u8> = line
            .split(',')
            .map(|v| v.trim().parse::<u8>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::usage(format!("bad state row {i}: {e}")))?;
        if tokens.len() != d {
            return Err(CliError::usage(format!("state row {i} has {} tokens, expected {d}", tokens.len())));
        }
        out.push(DiscreteState::new(tokens));
    }
    Ok(out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&args.ckpt)?;
    let seed = args.seed.unwrap_or(model.seed.wrapping_add(9_000_000));
    let bound = BoundModel { net: &model.net, store: &model.store, bias: None };
    let trajs = ctmc::simulate(&bound, &model.path, &model.grid, args.num, seed, threads_from_env());
    let ess = infer::ess(&ctmc::log_weights(&trajs))?;
    let log_z_estimate = infer::estimate_log_z(&trajs, model.path.log_z0())?;
    let log_z_lower_bound = infer::log_z_lower_bound_diagnostic(&model.path, &trajs).ok();

    let log_z_exact = if args.exact {
        let e = ExactEnumeration::new(&model.path)?;
        Some(e.log_z(&model.path, 1.0))
    } else {
        None
    };
    let nll = match &args.nll_data {
        Some(file) => {
            let (d, _) = model.path.dims();
            let data = read_states_csv(file, d)?;
            Some(infer::elbo_nll(&bound, &model.path, &model.grid, &data, seed.wrapping_add(1))?.mean_nll)
        }
        None => None,
    };
    let report = EvalReport { ess, log_z_estimate, log_z_exact, log_z_lower_bound, nll };
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_combopt(args: CombOptArgs) -> Result<(), CliError> {
    let problem = ProblemKind::from_name(&args.problem)?;
    let source = match problem {
        ProblemKind::Mis => GraphSource::Er { p: args.er_p },
        ProblemKind::MaxCut => GraphSource::Ba { m: args.ba_m },
    };
    std::fs::create_dir_all(&args.out)?;

    let trained = if args.untrained {
        None
    } else {
        let cfg = AmortizedTrainConfig {
            problem,
            n_range: (args.n_lo, args.n_hi),
            source,
            epochs: args.epochs,
            k_steps: args.steps.min(32),
            seed: args.seed,
            threads: threads_from_env(),
            ..Default::default()
        };
        let (net, store, losses) = combopt::train_amortized(&cfg)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(args.out.join("metrics.csv"), csv)?;
        Some((net, store))
    };

    // test instances come from a dedicated stream
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    rng.set_stream(777);
    let graphs: Vec<Graph> = (0..args.instances)
        .map(|_| source.generate((args.n_lo, args.n_hi), &mut rng))
        .collect::<dnfs_core::Result<_>>()?;
    std::fs::write(args.out.join("instances.jsonl"), combopt::graphs_to_jsonl(&graphs))?;

    let mut csv = String::from("instance,n,objective,oracle,drop,seconds\n");
    let mut objective_sum = 0.0;
    let mut mean_batch_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_n = 0usize;
    for (i, g) in graphs.iter().enumerate() {
        let opts = SolveOptions {
            samples: args.samples,
            k_steps: args.steps,
            refine_steps: args.refine_steps,
            seed: args.seed.wrapping_add(31_000 + i as u64),
            threads: threads_from_env(),
            ..Default::default()
        };
        let outcome = combopt::solve(
            problem,
            g,
            trained.as_ref().map(|(n, s)| (n, s)),
            &opts,
        )?;
        let oracle = match problem {
            ProblemKind::Mis if g.n <= 30 => Some(exact_mis(g)? as f64),
            ProblemKind::MaxCut if g.n <= 24 => Some(exact_maxcut(g)? as f64),
            _ => None,
        };
        objective_sum += outcome.objective;
        mean_batch_sum += outcome.mean_objective;
        let (oracle_str, drop_str) = match oracle {
            Some(o) => {
                ratio_sum += outcome.objective / o;
                ratio_n += 1;
                (o.to_string(), format!("{}", (o - outcome.objective) / o))
            }
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            g.n, outcome.objective, oracle_str, drop_str, outcome.seconds
        ));
    }
    std::fs::write(args.out.join("results.csv"), csv)?;
    println!(
        "{}",
        serde_json::json!({
            "problem": args.problem,
            "instances": graphs.len(),
            "mean_objective": objective_sum / graphs.len() as f64,
            "mean_batch_objective": mean_batch_sum / graphs.len() as f64,
            "mean_approx_ratio": if ratio_n > 0 { Some(ratio_sum / ratio_n as f64) } else { None },
            "trained": trained.is_some(),
            "refine_steps": args.refine_steps,
        })
    );
    Ok(())
}

fn cmd_ebm(args: EbmArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out)?;
    match args.task.as_str() {
        "ising" => {
            let ising = make_ising(args.grid, args.sigma)?;
            let d = args.grid * args.grid;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(12345));
            let mut x = DiscreteState::zeros(d);
            let mut data = Vec::with_capacity(args.data_size);
            let thin = 10;
            let burn = 200;
            for sweep in 0..(burn + args.data_size * thin) {
                gibbs_sweep(&ising, &mut x, &mut rng);
                if sweep >= burn && (sweep - burn) % thin == 0 {
                    data.push(x.clone());
                }
            }
            let cfg = EbmTrainConfig {
                rounds: args.rounds,
                seed: args.seed,
                threads: threads_from_env(),
                ..Default::default()
            };
            let truth = {
                let mut j = ising.adjacency.clone();
                for v in j.data.iter_mut() {
                    *v *= args.sigma;
                }
                j
            };
            let result = ebm::train_ising_ebm(&data, d, &cfg, Some(&truth))?;
            // learned couplings as CSV for heatmap rendering
            let mut csv = String::new();
            for i in 0..d {
                let row: Vec<String> =
                    (0..d).map(|j| format!("{}", result.j_learned.at(i, j))).collect();
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            std::fs::write(args.out.join("j_phi.csv"), csv)?;
            let mut metrics = String::from("round,ess\n");
            for (i, e) in result.ess_history.iter().enumerate() {
                metrics.push_str(&format!("{i},{e}\n"));
            }
            std::fs::write(args.out.join("metrics.csv"), metrics)?;
            println!(
                "{}",
                serde_json::json!({
                    "task": "ising",
                    "neg_log_rmse": result.neg_log_rmse,
                    "edge_precision": ebm::edge_precision(&result.j_learned, &ising.adjacency),
                })
            );
        }
        "gray" => {
            let density = Toy2d::from_name(&args.density)?;
            let target = GrayCode2DTarget::new(density);
            // quantised draws from the toy density via long-run Gibbs
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(54321));
            let mut x = DiscreteState::zeros(32);
            let mut data = Vec::with_capacity(args.data_size);
            for sweep in 0..(200 + args.data_size) {
                gibbs_sweep(&target, &mut x, &mut rng);
                if sweep >= 200 {
                    data.push(x.clone());
                }
            }
            let cfg = EbmTrainConfig {
                rounds: args.rounds,
                seed: args.seed,
                threads: threads_from_env(),
                ..Default::default()
            };
            let result = ebm::train_deep_ebm(&data, 32, 256, &cfg)?;
            let mut metrics = String::from("round,ess\n");
            for (i, e) in result.ess_history.iter().enumerate() {
                metrics.push_str(&format!("{i},{e}\n"));
            }
            std::fs::write(args.out.join("metrics.csv"), metrics)?;
            // held-out comparison: sampler output vs fresh data
            let path = AnnealedPath::new(Arc::new(result.energy.clone()), Schedule::Linear, 5.0)?;
            let grid = TimeGrid::new(cfg.k_steps)?;
            let (net, store) = &result.sampler;
            let bound = BoundModel { net, store, bias: None };
            let trajs = ctmc::simulate(&bound, &path, &grid, 512, args.seed.wrapping_add(99), threads_from_env());
            let samples = ctmc::final_states(&trajs);
            let holdout: Vec<DiscreteState> = data.iter().rev().take(512).cloned().collect();
            let mmd = ebm::mmd(&samples, &holdout, 0.1)?;
            println!("{}", serde_json::json!({"task": "gray", "density": args.density, "mmd": mmd}));
        }
        other => return Err(CliError::usage(format!("unknown ebm task {other}"))),
    }
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), CliError> {
    let spec = TargetSpec::from_flags(&args.target, None)?;
    let path = AnnealedPath::linear(spec.build()?);
    let enumeration = ExactEnumeration::new(&path)?;
    let log_z = enumeration.log_z(&path, args.t);
    let dt_log_z = enumeration.dt_log_z(&path, args.t);
    if let Some(n) = args.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
        let samples = enumeration.sample(&path, args.t, n, &mut rng);
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("oracle_samples.csv"));
        let (d, _) = path.dims();
        let mut csv = (0..d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
        csv.push('\n');
        for s in &samples {
            let row: Vec<String> = s.tokens.iter().map(|v| v.to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(&out, csv)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "t": args.t,
            "log_z": log_z,
            "dt_log_z": dt_log_z,
            "num_states": enumeration.num_states(),
        })
    );
    Ok(())
}
