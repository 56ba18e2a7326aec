//! Locally equivariant networks `G_t(tau, i | x)` whose ReLU is a one-way
//! rate matrix: a single-layer MLP and attention variant, the hollow
//! transformer (two strictly causal streams fused by a masked readout), and
//! its graph-conditioned form with shortest-path attention biases.
//!
//! All variants share the construction `G(tau, i | x) = (w_tau - w_{x_i})^T H(x)_i`
//! where `H` is hollow: row i of `H(x)` never reads `x_i`. Local equivariance
//! `G(tau, i | x) = -G(x_i, i | Swap(x, i, tau))` then holds bit-exactly, and
//! the entries at `tau = x_i` are exactly zero.

use serde::{Deserialize, Serialize};

use crate::combopt::Graph;
use crate::targets::DiscreteState;
use crate::tensor::{Arr, NodeId, ParamStore, Tape};
use crate::{Error, Result};

const NEG_FILL: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    LeMlp,
    LeAttn,
    LeTf,
    LeGf,
}

impl Variant {
    pub fn prefix(&self) -> &'static str {
        match self {
            Variant::LeMlp => "lemlp",
            Variant::LeAttn => "leattn",
            Variant::LeTf => "letf",
            Variant::LeGf => "legf",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "lemlp" => Ok(Variant::LeMlp),
            "leattn" => Ok(Variant::LeAttn),
            "letf" => Ok(Variant::LeTf),
            "legf" => Ok(Variant::LeGf),
            other => Err(Error::Config(format!("unknown network variant {other}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub d: usize,
    pub s: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub time_dim: usize,
    /// Shortest-path distances beyond this clamp to it (leGF only).
    pub max_dist: usize,
}

impl NetworkConfig {
    pub fn new(variant: Variant, d: usize, s: usize) -> Self {
        let (hidden, layers) = match variant {
            Variant::LeTf => (128, 3),
            Variant::LeGf => (256, 5),
            _ => (128, 1),
        };
        NetworkConfig { variant, d, s, hidden, layers, heads: 4, time_dim: 32, max_dist: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 && matches!(self.variant, Variant::LeTf | Variant::LeGf) {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        Ok(())
    }
}

/// Per-shortest-path-distance bucket indices for every vertex pair,
/// shared across all attention layers. Distances above `max_dist` clamp
/// to `max_dist`; disconnected pairs get a dedicated final bucket.
#[derive(Clone, Debug)]
pub struct StructuralBias {
    pub d: usize,
    pub n_buckets: usize,
    /// Row-major d x d bucket index per pair.
    pub buckets: Vec<usize>,
}

/// BFS all-pairs distances mapped into bias buckets.
pub fn legf_bias(graph: &Graph, max_dist: usize) -> StructuralBias {
    let d = graph.n;
    let disconnected = max_dist + 1;
    let mut buckets = vec![disconnected; d * d];
    for src in 0..d {
        let mut dist = vec![usize::MAX; d];
        dist[src] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &graph.adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for (dst, &dv) in dist.iter().enumerate() {
            buckets[src * d + dst] = if dv == usize::MAX { disconnected } else { dv.min(max_dist) };
        }
    }
    StructuralBias { d, n_buckets: max_dist + 2, buckets }
}

/// Sinusoidal features of t at geometric frequencies from 1 to 1000.
/// The frequencies are incommensurate with the evenly spaced grids used in
/// training so no feature vanishes at every grid time.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = (dim / 2).max(1);
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let f = (1000.0f64).powf(j as f64 / (half.max(2) - 1) as f64);
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
    out
}

/// ReLU of G as the one-way rates plus the conservative diagonal.
/// Entry (i, x_i) of a well-formed G is zero, so the identity column never
/// contributes.
pub fn rate_from_g(g: &Arr) -> (Arr, f64) {
    let mut rates = g.clone();
    let mut total = 0.0;
    for v in rates.data.iter_mut() {
        *v = v.max(0.0);
        total += *v;
    }
    (rates, -total)
}

/// A locally equivariant network bound to a parameter-name prefix.
/// Parameters live in an external [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LeNet {
    pub config: NetworkConfig,
}

impl LeNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(LeNet { config })
    }

    /// Create all parameters in `store`. Embeddings and linear maps get
    /// small uniform init. The output projection `omega` starts near zero
    /// so the initial rate matrix is tiny and the first trajectories stay
    /// close to the prior-driven identity chain; it cannot start at exactly
    /// zero because G = 0 sits on the flat spot of both ReLU gates (the
    /// subgradient at 0 is 0), which would freeze every parameter.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl rand::Rng) -> Result<()> {
        let c = &self.config;
        let p = c.variant.prefix();
        let h = c.hidden;
        let mut uniform = |store: &mut ParamStore, name: String, shape: Vec<usize>, a: f64| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect();
            store.insert(&name, Arr::new(shape, data))
        };
        uniform(store, format!("{p}.tok_embed"), vec![c.s, h], 0.02)?;
        uniform(store, format!("{p}.pos_embed"), vec![c.d, h], 0.02)?;
        uniform(store, format!("{p}.t_w"), vec![c.time_dim, h], (1.0 / c.time_dim as f64).sqrt())?;
        store.insert(&format!("{p}.t_b"), Arr::zeros(vec![h]))?;
        let wa = (1.0 / h as f64).sqrt();
        match c.variant {
            Variant::LeMlp => {
                for k in 0..2 {
                    uniform(store, format!("{p}.mix{k}.w"), vec![c.d, c.d], (1.0 / c.d as f64).sqrt())?;
                    store.insert(&format!("{p}.mix{k}.b"), Arr::zeros(vec![h]))?;
                }
            }
            Variant::LeAttn => {
                for nm in ["wq", "wk", "wv", "wo"] {
                    uniform(store, format!("{p}.attn.{nm}"), vec![h, h], wa)?;
                }
                for nm in ["bq", "bv", "bo"] {
                    store.insert(&format!("{p}.attn.{nm}"), Arr::zeros(vec![h]))?;
                }
            }
            Variant::LeTf | Variant::LeGf => {
                uniform(store, format!("{p}.bos"), vec![1, h], 0.02)?;
                uniform(store, format!("{p}.eos"), vec![1, h], 0.02)?;
                for stream in ["l2r", "r2l"] {
                    for l in 0..c.layers {
                        let base = format!("{p}.{stream}.{l}");
                        store.insert(&format!("{base}.ln1.g"), Arr::full(vec![h], 1.0))?;
                        store.insert(&format!("{base}.ln1.b"), Arr::zeros(vec![h]))?;
                        for nm in ["wq", "wk", "wv", "wo"] {
                            uniform(store, format!("{base}.attn.{nm}"), vec![h, h], wa)?;
                        }
                        for nm in ["bq", "bv", "bo"] {
                            store.insert(&format!("{base}.attn.{nm}"), Arr::zeros(vec![h]))?;
                        }
                        store.insert(&format!("{base}.ln2.g"), Arr::full(vec![h], 1.0))?;
                        store.insert(&format!("{base}.ln2.b"), Arr::zeros(vec![h]))?;
                        uniform(store, format!("{base}.ffn.w1"), vec![h, 2 * h], wa)?;
                        store.insert(&format!("{base}.ffn.b1"), Arr::zeros(vec![2 * h]))?;
                        uniform(store, format!("{base}.ffn.w2"), vec![2 * h, h], (1.0 / (2.0 * h as f64)).sqrt())?;
                        store.insert(&format!("{base}.ffn.b2"), Arr::zeros(vec![h]))?;
                    }
                    store.insert(&format!("{p}.{stream}.lnf.g"), Arr::full(vec![h], 1.0))?;
                    store.insert(&format!("{p}.{stream}.lnf.b"), Arr::zeros(vec![h]))?;
                }
                for nm in ["wq_l", "wq_r", "wk_l", "wk_r", "wv_l", "wv_r", "wo"] {
                    uniform(store, format!("{p}.ro.{nm}"), vec![h, h], wa)?;
                }
                store.insert(&format!("{p}.ro.bo"), Arr::zeros(vec![h]))?;
                if c.variant == Variant::LeGf {
                    store.insert(&format!("{p}.bias"), Arr::zeros(vec![c.max_dist + 2, 1]))?;
                }
            }
        }
        uniform(store, format!("{p}.omega"), vec![c.s, h], 0.01)?;
        Ok(())
    }

    /// Hollow trunk output `H(x)` as a d x hidden node.
    pub fn h_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: f64,
        x: &DiscreteState,
        bias: Option<&StructuralBias>,
    ) -> Result<NodeId> {
        let c = &self.config;
        // the graph-conditioned variant handles any instance up to the
        // configured capacity; the sequence variants are fixed-width
        let d = x.len();
        let size_ok = if c.variant == Variant::LeGf { d >= 1 && d <= c.d } else { d == c.d };
        if !size_ok {
            return Err(Error::Shape(format!("state length {} vs config d {}", d, c.d)));
        }
        if x.tokens.iter().any(|&tok| tok as usize >= c.s) {
            return Err(Error::Shape("token out of range for config S".into()));
        }
        if c.variant == Variant::LeGf && bias.is_none() {
            return Err(Error::Config("leGF forward needs a graph bias".into()));
        }
        let p = c.variant.prefix();

        // time conditioning, broadcast to every position
        let feats = tape.constant(Arr::matrix(1, c.time_dim, time_features(t, c.time_dim)));
        let t_w = tape.param(store, &format!("{p}.t_w"))?;
        let t_b = tape.param(store, &format!("{p}.t_b"))?;
        let t_row = tape.matmul(feats, t_w)?;
        let t_row = tape.add(t_row, t_b)?;
        let ones_d1 = tape.constant(Arr::full(vec![d, 1], 1.0));
        let t_exp = tape.matmul(ones_d1, t_row)?;

        let tok_embed = tape.param(store, &format!("{p}.tok_embed"))?;
        let pos_full = tape.param(store, &format!("{p}.pos_embed"))?;
        let pos_embed = if d < c.d { tape.slice(pos_full, 0, 0, d)? } else { pos_full };
        let indices: Vec<usize> = x.tokens.iter().map(|&v| v as usize).collect();
        let emb = tape.embed_lookup(tok_embed, indices)?;

        match c.variant {
            Variant::LeMlp => {
                let base0 = tape.add(emb, pos_embed)?;
                let base = tape.add(base0, t_exp)?;
                let diag_mask: Vec<bool> = (0..d * d).map(|k| k / d == k % d).collect();
                let mut acc: Option<NodeId> = None;
                for k in 0..2 {
                    let w = tape.param(store, &format!("{p}.mix{k}.w"))?;
                    let w = tape.masked_fill(w, diag_mask.clone(), 0.0)?;
                    let b = tape.param(store, &format!("{p}.mix{k}.b"))?;
                    let z = tape.matmul(w, base)?;
                    let z = tape.add(z, b)?;
                    let a = tape.relu(z)?;
                    acc = Some(match acc {
                        None => a,
                        Some(prev) => tape.add(prev, a)?,
                    });
                }
                Ok(acc.unwrap())
            }
            Variant::LeAttn => {
                let kv0 = tape.add(emb, pos_embed)?;
                let kv = tape.add(kv0, t_exp)?;
                // queries are built from position and time only, keeping row i
                // independent of its own token
                let q_in = tape.add(pos_embed, t_exp)?;
                let wq = tape.param(store, &format!("{p}.attn.wq"))?;
                let wk = tape.param(store, &format!("{p}.attn.wk"))?;
                let wv = tape.param(store, &format!("{p}.attn.wv"))?;
                let wo = tape.param(store, &format!("{p}.attn.wo"))?;
                let bq = tape.param(store, &format!("{p}.attn.bq"))?;
                let bv = tape.param(store, &format!("{p}.attn.bv"))?;
                let bo = tape.param(store, &format!("{p}.attn.bo"))?;
                let q0 = tape.matmul(q_in, wq)?;
                let q = tape.add(q0, bq)?;
                // no key bias: it shifts every logit in a row equally and
                // cancels in the softmax
                let k = tape.matmul(kv, wk)?;
                let v0 = tape.matmul(kv, wv)?;
                let v = tape.add(v0, bv)?;
                // mask out s = i
                let diag_mask: Vec<bool> = (0..d * d).map(|idx| idx / d == idx % d).collect();
                let attn = multi_head_attention(tape, q, k, v, c.heads, &diag_mask, None)?;
                let out0 = tape.matmul(attn, wo)?;
                Ok(tape.add(out0, bo)?)
            }
            Variant::LeTf | Variant::LeGf => {
                // shifted autoregressive inputs with learned boundary tokens
                let bos = tape.param(store, &format!("{p}.bos"))?;
                let eos = tape.param(store, &format!("{p}.eos"))?;
                let l_tok = if d > 1 {
                    let head = tape.slice(emb, 0, 0, d - 1)?;
                    tape.concat(&[bos, head], 0)?
                } else {
                    bos
                };
                let r_tok = if d > 1 {
                    let tail = tape.slice(emb, 0, 1, d)?;
                    tape.concat(&[tail, eos], 0)?
                } else {
                    eos
                };
                let l0 = tape.add(l_tok, pos_embed)?;
                let mut xl = tape.add(l0, t_exp)?;
                let r0 = tape.add(r_tok, pos_embed)?;
                let mut xr = tape.add(r0, t_exp)?;

                // structural bias, canonicalised so equal bucket scalars
                // cancel exactly in the softmax
                let bias_node = match (c.variant, bias) {
                    (Variant::LeGf, Some(sb)) => {
                        if sb.d != d {
                            return Err(Error::Shape("graph bias size mismatch".into()));
                        }
                        Some(self.bias_matrix(tape, store, sb)?)
                    }
                    _ => None,
                };

                // causal masks include the diagonal; inputs are shifted so
                // position i still never sees x_i
                let l_mask: Vec<bool> = (0..d * d).map(|idx| idx % d > idx / d).collect();
                let r_mask: Vec<bool> = (0..d * d).map(|idx| idx % d < idx / d).collect();
                for l in 0..c.layers {
                    xl = self.trunk_layer(tape, store, &format!("{p}.l2r.{l}"), xl, &l_mask, bias_node)?;
                    xr = self.trunk_layer(tape, store, &format!("{p}.r2l.{l}"), xr, &r_mask, bias_node)?;
                }
                let g_l = tape.param(store, &format!("{p}.l2r.lnf.g"))?;
                let b_l = tape.param(store, &format!("{p}.l2r.lnf.b"))?;
                let xl = tape.layernorm(xl, g_l, b_l)?;
                let g_r = tape.param(store, &format!("{p}.r2l.lnf.g"))?;
                let b_r = tape.param(store, &format!("{p}.r2l.lnf.b"))?;
                let xr = tape.layernorm(xr, g_r, b_r)?;

                // readout: fused queries over the concatenated masked streams
                let wq_l = tape.param(store, &format!("{p}.ro.wq_l"))?;
                let wq_r = tape.param(store, &format!("{p}.ro.wq_r"))?;
                let wk_l = tape.param(store, &format!("{p}.ro.wk_l"))?;
                let wk_r = tape.param(store, &format!("{p}.ro.wk_r"))?;
                let wv_l = tape.param(store, &format!("{p}.ro.wv_l"))?;
                let wv_r = tape.param(store, &format!("{p}.ro.wv_r"))?;
                let ql = tape.matmul(xl, wq_l)?;
                let qr = tape.matmul(xr, wq_r)?;
                let q = tape.add(ql, qr)?;
                let kl = tape.matmul(xl, wk_l)?;
                let kr = tape.matmul(xr, wk_r)?;
                let vl = tape.matmul(xl, wv_l)?;
                let vr = tape.matmul(xr, wv_r)?;
                let keys = tape.concat(&[kl, kr], 0)?;
                let vals = tape.concat(&[vl, vr], 0)?;
                // left keys valid at j <= i, right keys at j >= i
                let mut ro_mask = vec![false; d * 2 * d];
                for i in 0..d {
                    for j in 0..d {
                        ro_mask[i * 2 * d + j] = j > i;
                        ro_mask[i * 2 * d + d + j] = j < i;
                    }
                }
                let ro_bias = match bias_node {
                    Some(b) => Some(tape.concat(&[b, b], 1)?),
                    None => None,
                };
                let fused =
                    multi_head_attention(tape, q, keys, vals, c.heads, &ro_mask, ro_bias)?;
                let wo = tape.param(store, &format!("{p}.ro.wo"))?;
                let bo = tape.param(store, &format!("{p}.ro.bo"))?;
                let out0 = tape.matmul(fused, wo)?;
                Ok(tape.add(out0, bo)?)
            }
        }
    }

    /// d x d learnable structural-bias matrix, shifted by a reference bucket
    /// so that a constant bias table contributes exactly zero.
    fn bias_matrix(&self, tape: &mut Tape, store: &ParamStore, sb: &StructuralBias) -> Result<NodeId> {
        let d = sb.d;
        let p = self.config.variant.prefix();
        let table = tape.param(store, &format!("{p}.bias"))?;
        let flat = tape.embed_lookup(table, sb.buckets.clone())?; // (d*d) x 1
        let mut rows = Vec::with_capacity(d);
        for i in 0..d {
            let col = tape.slice(flat, 0, i * d, (i + 1) * d)?;
            rows.push(tape.transpose(col)?);
        }
        let mat = tape.concat(&rows, 0)?;
        // reference = distance-1 bucket; softmax is invariant to the shift
        let reference = tape.embed_lookup(table, vec![1])?; // 1 x 1
        let ones_d1 = tape.constant(Arr::full(vec![d, 1], 1.0));
        let ref_col = tape.matmul(ones_d1, reference)?;
        let ones_1d = tape.constant(Arr::full(vec![1, d], 1.0));
        let ref_mat = tape.matmul(ref_col, ones_1d)?;
        Ok(tape.sub(mat, ref_mat)?)
    }

    /// Pre-norm transformer block: masked self-attention then feed-forward,
    /// both with residual connections.
    fn trunk_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        base: &str,
        x: NodeId,
        mask: &[bool],
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let heads = self.config.heads;
        let g1 = tape.param(store, &format!("{base}.ln1.g"))?;
        let b1 = tape.param(store, &format!("{base}.ln1.b"))?;
        let a = tape.layernorm(x, g1, b1)?;
        let wq = tape.param(store, &format!("{base}.attn.wq"))?;
        let wk = tape.param(store, &format!("{base}.attn.wk"))?;
        let wv = tape.param(store, &format!("{base}.attn.wv"))?;
        let wo = tape.param(store, &format!("{base}.attn.wo"))?;
        let bq = tape.param(store, &format!("{base}.attn.bq"))?;
        let bv = tape.param(store, &format!("{base}.attn.bv"))?;
        let bo = tape.param(store, &format!("{base}.attn.bo"))?;
        let q0 = tape.matmul(a, wq)?;
        let q = tape.add(q0, bq)?;
        let k = tape.matmul(a, wk)?;
        let v0 = tape.matmul(a, wv)?;
        let v = tape.add(v0, bv)?;
        let attn = multi_head_attention(tape, q, k, v, heads, mask, bias)?;
        let proj0 = tape.matmul(attn, wo)?;
        let proj = tape.add(proj0, bo)?;
        let x = tape.add(x, proj)?;

        let g2 = tape.param(store, &format!("{base}.ln2.g"))?;
        let b2 = tape.param(store, &format!("{base}.ln2.b"))?;
        let f = tape.layernorm(x, g2, b2)?;
        let w1 = tape.param(store, &format!("{base}.ffn.w1"))?;
        let bf1 = tape.param(store, &format!("{base}.ffn.b1"))?;
        let w2 = tape.param(store, &format!("{base}.ffn.w2"))?;
        let bf2 = tape.param(store, &format!("{base}.ffn.b2"))?;
        let h1 = tape.matmul(f, w1)?;
        let h1 = tape.add(h1, bf1)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.matmul(h1, w2)?;
        let h2 = tape.add(h2, bf2)?;
        Ok(tape.add(x, h2)?)
    }

    /// Full forward: `G(tau, i | x) = (w_tau - w_{x_i})^T H(x)_i` as a
    /// d x S node. Entries at `tau = x_i` are exactly zero by construction.
    pub fn g_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: f64,
        x: &DiscreteState,
        bias: Option<&StructuralBias>,
    ) -> Result<NodeId> {
        let c = &self.config;
        let hmat = self.h_node(tape, store, t, x, bias)?;
        let p = c.variant.prefix();
        let omega = tape.param(store, &format!("{p}.omega"))?;
        let omega_t = tape.transpose(omega)?;
        let proj = tape.matmul(hmat, omega_t)?; // d x S, entry (i, tau) = w_tau . H_i
        // subtract each row's own-token projection via a one-hot row-select
        let mut keep_mask = vec![true; x.len() * c.s];
        for (i, &tok) in x.tokens.iter().enumerate() {
            keep_mask[i * c.s + tok as usize] = false;
        }
        let own = tape.masked_fill(proj, keep_mask, 0.0)?;
        let ones_ss = tape.constant(Arr::full(vec![c.s, c.s], 1.0));
        let own_tiled = tape.matmul(own, ones_ss)?;
        Ok(tape.sub(proj, own_tiled)?)
    }

    /// Forward returning the plain value (tape discarded).
    pub fn g_matrix(
        &self,
        store: &ParamStore,
        t: f64,
        x: &DiscreteState,
        bias: Option<&StructuralBias>,
    ) -> Result<Arr> {
        let mut tape = Tape::new();
        let g = self.g_node(&mut tape, store, t, x, bias)?;
        Ok(tape.value(g).clone())
    }

    pub fn h_matrix(
        &self,
        store: &ParamStore,
        t: f64,
        x: &DiscreteState,
        bias: Option<&StructuralBias>,
    ) -> Result<Arr> {
        let mut tape = Tape::new();
        let h = self.h_node(&mut tape, store, t, x, bias)?;
        Ok(tape.value(h).clone())
    }
}

/// Masked multi-head scaled dot-product attention. `q` is dq x h, `k`/`v`
/// are nk x h; `mask[i * nk + j]` hides key j from query i and `bias`
/// (dq x nk) is added to the logits before masking. Logits are scaled by
/// `1/sqrt(d_head)` when the key set is single-stream and `1/sqrt(2 d_head)`
/// when two streams are concatenated.
fn multi_head_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: &[bool],
    bias: Option<NodeId>,
) -> Result<NodeId> {
    let h = tape.value(q).shape[1];
    let dq = tape.value(q).shape[0];
    let nk = tape.value(k).shape[0];
    let hd = h / heads;
    let streams = if nk == 2 * dq { 2.0 } else { 1.0 };
    let scale = 1.0 / (streams * hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qs = tape.slice(q, 1, head * hd, (head + 1) * hd)?;
        let ks = tape.slice(k, 1, head * hd, (head + 1) * hd)?;
        let vs = tape.slice(v, 1, head * hd, (head + 1) * hd)?;
        let kt = tape.transpose(ks)?;
        let raw = tape.matmul(qs, kt)?;
        let mut scores = tape.scale(raw, scale)?;
        if let Some(b) = bias {
            scores = tape.add(scores, b)?;
        }
        let masked = tape.masked_fill(scores, mask.to_vec(), NEG_FILL)?;
        let weights = tape.softmax_lastdim(masked)?;
        outs.push(tape.matmul(weights, vs)?);
    }
    tape.concat(&outs, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(variant: Variant, d: usize, s: usize) -> NetworkConfig {
        NetworkConfig { variant, d, s, hidden: 16, layers: 2, heads: 2, time_dim: 8, max_dist: 4 }
    }

    fn init_model(variant: Variant, d: usize, s: usize, seed: u64) -> (LeNet, ParamStore) {
        let net = LeNet::new(small_config(variant, d, s)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.init_params(&mut store, &mut rng).unwrap();
        // omega starts at zero; randomise it so G is non-trivial in tests
        let p = net.config.variant.prefix();
        let shape = store.value(&format!("{p}.omega")).unwrap().shape.clone();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        store.set_value(&format!("{p}.omega"), Arr::new(shape, data)).unwrap();
        (net, store)
    }

    fn complete_bias(d: usize, max_dist: usize) -> StructuralBias {
        let g = Graph::complete(d);
        legf_bias(&g, max_dist)
    }

    fn rand_state(d: usize, s: usize, rng: &mut ChaCha8Rng) -> DiscreteState {
        DiscreteState::new((0..d).map(|_| rng.random_range(0..s as u8)).collect())
    }

    fn all_variants() -> Vec<Variant> {
        vec![Variant::LeMlp, Variant::LeAttn, Variant::LeTf, Variant::LeGf]
    }

    #[test]
    fn g_is_zero_at_identity_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in all_variants() {
            let (net, store) = init_model(variant, 5, 3, 7);
            let bias = complete_bias(5, 4);
            let b = if variant == Variant::LeGf { Some(&bias) } else { None };
            for _ in 0..5 {
                let x = rand_state(5, 3, &mut rng);
                let g = net.g_matrix(&store, 0.4, &x, b).unwrap();
                for (i, &tok) in x.tokens.iter().enumerate() {
                    assert_eq!(g.at(i, tok as usize), 0.0, "{variant:?}");
                }
            }
        }
    }

    #[test]
    fn local_equivariance_holds_on_random_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for variant in all_variants() {
            let (net, store) = init_model(variant, 6, 3, 11);
            let bias = complete_bias(6, 4);
            let b = if variant == Variant::LeGf { Some(&bias) } else { None };
            let mut worst: f64 = 0.0;
            for _ in 0..60 {
                let x = rand_state(6, 3, &mut rng);
                let i = rng.random_range(0..6);
                let tau = rng.random_range(0..3u8);
                let t = rng.random::<f64>();
                let g = net.g_matrix(&store, t, &x, b).unwrap();
                let swapped = x.swap(i, tau);
                let g2 = net.g_matrix(&store, t, &swapped, b).unwrap();
                let lhs = g.at(i, tau as usize);
                let rhs = g2.at(i, x.tokens[i] as usize);
                worst = worst.max((lhs + rhs).abs());
            }
            assert!(worst < 1e-6, "{variant:?}: equivariance residual {worst}");
        }
    }

    #[test]
    fn hollow_rows_are_bit_exact_under_own_token_rewrites() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in all_variants() {
            let (net, store) = init_model(variant, 5, 3, 13);
            let bias = complete_bias(5, 4);
            let b = if variant == Variant::LeGf { Some(&bias) } else { None };
            let x = rand_state(5, 3, &mut rng);
            let h0 = net.h_matrix(&store, 0.3, &x, b).unwrap();
            let width = h0.shape[1];
            for i in 0..5 {
                for tau in 0..3u8 {
                    let h1 = net.h_matrix(&store, 0.3, &x.swap(i, tau), b).unwrap();
                    for j in 0..width {
                        assert_eq!(
                            h0.at(i, j).to_bits(),
                            h1.at(i, j).to_bits(),
                            "{variant:?} row {i} leaked through token {tau}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_position_transformer_ignores_its_only_token() {
        let (net, store) = init_model(Variant::LeTf, 1, 2, 17);
        let h0 = net.h_matrix(&store, 0.5, &DiscreteState::new(vec![0]), None).unwrap();
        let h1 = net.h_matrix(&store, 0.5, &DiscreteState::new(vec![1]), None).unwrap();
        assert_eq!(h0.data, h1.data);
    }

    #[test]
    fn two_position_transformer_row0_depends_only_on_x1() {
        let (net, store) = init_model(Variant::LeTf, 2, 2, 19);
        let h00 = net.h_matrix(&store, 0.2, &DiscreteState::new(vec![0, 1]), None).unwrap();
        let h10 = net.h_matrix(&store, 0.2, &DiscreteState::new(vec![1, 1]), None).unwrap();
        let w = h00.shape[1];
        for j in 0..w {
            assert_eq!(h00.at(0, j), h10.at(0, j));
        }
        // and flipping x1 does change row 0
        let h01 = net.h_matrix(&store, 0.2, &DiscreteState::new(vec![0, 0]), None).unwrap();
        let delta: f64 = (0..w).map(|j| (h00.at(0, j) - h01.at(0, j)).abs()).sum();
        assert!(delta > 0.0, "row 0 ignored its visible context");
    }

    #[test]
    fn rates_are_relu_of_g_with_conservative_diagonal() {
        let g = Arr::matrix(2, 2, vec![0.0, -3.0, 2.0, 0.0]);
        let (rates, diag) = rate_from_g(&g);
        assert_eq!(rates.data, vec![0.0, 0.0, 2.0, 0.0]);
        assert_eq!(diag, -2.0);

        let all_neg = Arr::matrix(1, 2, vec![0.0, -1.0]);
        let (r, dg) = rate_from_g(&all_neg);
        assert_eq!(r.data, vec![0.0, 0.0]);
        assert_eq!(dg, 0.0);
    }

    #[test]
    fn one_way_property_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (net, store) = init_model(Variant::LeTf, 6, 2, 23);
        for _ in 0..100 {
            let x = rand_state(6, 2, &mut rng);
            let i = rng.random_range(0..6);
            let t = rng.random::<f64>();
            let g = net.g_matrix(&store, t, &x, None).unwrap();
            let tau = 1 - x.tokens[i];
            let fwd = g.at(i, tau as usize).max(0.0);
            if fwd > 0.0 {
                let swapped = x.swap(i, tau);
                let gb = net.g_matrix(&store, t, &swapped, None).unwrap();
                let back = gb.at(i, x.tokens[i] as usize).max(0.0);
                assert_eq!(back, 0.0, "reverse rate must vanish exactly");
            }
        }
    }

    #[test]
    fn structural_bias_buckets() {
        // complete graph: all off-diagonal distances are 1
        let k3 = legf_bias(&Graph::complete(3), 4);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0 } else { 1 };
                assert_eq!(k3.buckets[i * 3 + j], expect);
            }
        }
        // path graph 0-1-2: distance two between the ends
        let p3 = legf_bias(&Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), 4);
        assert_eq!(p3.buckets[2], 2);
        assert_eq!(p3.buckets[2 * 3], 2);
        // two disjoint edges: cross pairs land in the disconnected bucket
        let dis = legf_bias(&Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap(), 4);
        assert_eq!(dis.buckets[2], 5);
        assert_eq!(dis.n_buckets, 6);
        // clamping
        let chain = Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let clamped = legf_bias(&chain, 2);
        assert_eq!(clamped.buckets[4], 2, "distance 4 clamps to max_dist");
    }

    #[test]
    fn legf_on_complete_graph_with_flat_bias_matches_letf_bit_exactly() {
        let d = 5;
        let (tf, tf_store) = init_model(Variant::LeTf, d, 2, 29);
        let gf = LeNet::new(small_config(Variant::LeGf, d, 2)).unwrap();
        let mut gf_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        gf.init_params(&mut gf_store, &mut rng).unwrap();
        // mirror every trunk weight from the leTF model
        for (name, p) in tf_store.iter() {
            let suffix = name.strip_prefix("letf.").unwrap();
            gf_store.set_value(&format!("legf.{suffix}"), p.value.clone()).unwrap();
        }
        // any constant bias table must cancel in the softmax
        gf_store
            .set_value("legf.bias", Arr::full(vec![6, 1], 0.7))
            .unwrap();
        let bias = complete_bias(d, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x = rand_state(d, 2, &mut rng);
            let t = rng.random::<f64>();
            let a = tf.g_matrix(&tf_store, t, &x, None).unwrap();
            let b = gf.g_matrix(&gf_store, t, &x, Some(&bias)).unwrap();
            for k in 0..a.numel() {
                assert_eq!(a.data[k].to_bits(), b.data[k].to_bits(), "entry {k}");
            }
        }
    }

    #[test]
    fn fresh_models_start_near_the_identity_chain() {
        let net = LeNet::new(small_config(Variant::LeTf, 4, 2)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        net.init_params(&mut store, &mut rng).unwrap();
        let x = DiscreteState::new(vec![0, 1, 1, 0]);
        let g = net.g_matrix(&store, 0.7, &x, None).unwrap();
        // near-zero output projection: tiny rates, but not an exact zero
        // (G = 0 sits on the flat spot of both ReLU gates and cannot train)
        let max = g.data.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(max < 0.1, "initial |G| too large: {max}");
        // and with the projection forced to zero the rates vanish exactly
        let shape = store.value("letf.omega").unwrap().shape.clone();
        store.set_value("letf.omega", Arr::zeros(shape)).unwrap();
        let g = net.g_matrix(&store, 0.7, &x, None).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lemlp_with_zero_mixers_is_constant_in_x() {
        let net = LeNet::new(small_config(Variant::LeMlp, 4, 2)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        net.init_params(&mut store, &mut rng).unwrap();
        for k in 0..2 {
            let name = format!("lemlp.mix{k}.w");
            let shape = store.value(&name).unwrap().shape.clone();
            store.set_value(&name, Arr::zeros(shape)).unwrap();
        }
        let h0 = net.h_matrix(&store, 0.5, &DiscreteState::new(vec![0, 0, 0, 0]), None).unwrap();
        let h1 = net.h_matrix(&store, 0.5, &DiscreteState::new(vec![1, 1, 0, 1]), None).unwrap();
        assert_eq!(h0.data, h1.data);
    }

    #[test]
    fn leattn_row0_attends_only_to_other_positions() {
        let (net, store) = init_model(Variant::LeAttn, 2, 2, 41);
        // flipping x0 must leave row 0 unchanged, flipping x1 must move it
        let h_a = net.h_matrix(&store, 0.1, &DiscreteState::new(vec![0, 1]), None).unwrap();
        let h_b = net.h_matrix(&store, 0.1, &DiscreteState::new(vec![1, 1]), None).unwrap();
        let h_c = net.h_matrix(&store, 0.1, &DiscreteState::new(vec![0, 0]), None).unwrap();
        let w = h_a.shape[1];
        for j in 0..w {
            assert_eq!(h_a.at(0, j), h_b.at(0, j));
        }
        let moved: f64 = (0..w).map(|j| (h_a.at(0, j) - h_c.at(0, j)).abs()).sum();
        assert!(moved > 0.0);
    }

    #[test]
    fn forward_rejects_mismatched_state() {
        let (net, store) = init_model(Variant::LeTf, 4, 2, 43);
        let bad = DiscreteState::new(vec![0, 1]);
        assert!(net.g_matrix(&store, 0.5, &bad, None).is_err());
        let bad_tok = DiscreteState::new(vec![0, 1, 2, 0]);
        assert!(net.g_matrix(&store, 0.5, &bad_tok, None).is_err());
    }
}
