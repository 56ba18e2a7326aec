//! Unnormalised target distributions over `{0..S-1}^d` and their
//! 1-Hamming-neighbourhood log-ratios.
//!
//! Everything binary in this crate is handled in bit form `x in {0,1}^d`
//! with `log rho(x) = x^T W x + h^T x`, so a single closed-form ratio kernel
//! serves Ising lattices, learned quadratic models, and combinatorial
//! energies. Spin models are mapped through `s = 2b - 1`.

use serde::{Deserialize, Serialize};

use crate::tensor::{Arr, ParamStore, Tape};
use crate::{Error, Result};

/// A point in `{0..S-1}^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiscreteState {
    pub tokens: Vec<u8>,
}

impl DiscreteState {
    pub fn new(tokens: Vec<u8>) -> Self {
        DiscreteState { tokens }
    }

    pub fn zeros(d: usize) -> Self {
        DiscreteState { tokens: vec![0; d] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy with position `i` set to `tau`.
    pub fn swap(&self, i: usize, tau: u8) -> Self {
        let mut t = self.tokens.clone();
        t[i] = tau;
        DiscreteState { tokens: t }
    }

    /// Binary flip at position `i`.
    pub fn flip(&self, i: usize) -> Self {
        self.swap(i, 1 - self.tokens[i])
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.tokens.iter().map(|&t| t as f64).collect()
    }

    /// Little-endian lexicographic index (token 0 varies fastest).
    pub fn index(&self, s: usize) -> usize {
        let mut idx = 0usize;
        for &t in self.tokens.iter().rev() {
            idx = idx * s + t as usize;
        }
        idx
    }

    pub fn from_index(mut idx: usize, d: usize, s: usize) -> Self {
        let mut tokens = Vec::with_capacity(d);
        for _ in 0..d {
            tokens.push((idx % s) as u8);
            idx /= s;
        }
        DiscreteState { tokens }
    }
}

/// An unnormalised distribution `rho` over `{0..S-1}^d`.
pub trait Target: Send + Sync {
    /// (d, S)
    fn dims(&self) -> (usize, usize);

    /// `log rho(x)`, up to the unknown normaliser.
    fn log_unnorm(&self, x: &DiscreteState) -> f64;

    /// d x S matrix with entry (i, tau) = `log rho(x with x_i = tau) - log rho(x)`.
    /// Entry (i, x_i) is exactly zero. The default evaluates every neighbour.
    fn neighbor_log_ratios(&self, x: &DiscreteState) -> Arr {
        let (d, s) = self.dims();
        assert_eq!(x.len(), d, "state length mismatch");
        let base = self.log_unnorm(x);
        let mut out = Arr::zeros(vec![d, s]);
        for i in 0..d {
            for tau in 0..s as u8 {
                if tau != x.tokens[i] {
                    out.data[i * s + tau as usize] = self.log_unnorm(&x.swap(i, tau)) - base;
                }
            }
        }
        out
    }
}

/// Flat distribution; `log rho = 0` everywhere.
#[derive(Clone, Debug)]
pub struct UniformTarget {
    pub d: usize,
    pub s: usize,
}

impl Target for UniformTarget {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.s)
    }
    fn log_unnorm(&self, _x: &DiscreteState) -> f64 {
        0.0
    }
    fn neighbor_log_ratios(&self, _x: &DiscreteState) -> Arr {
        Arr::zeros(vec![self.d, self.s])
    }
}

/// `log rho(x) = x^T W x + h^T x` over bits.
#[derive(Clone, Debug)]
pub struct QuadraticBinaryTarget {
    pub w: Arr,
    pub h: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct QuadraticJson {
    d: usize,
    w: Vec<f64>,
    h: Vec<f64>,
}

impl QuadraticBinaryTarget {
    pub fn new(w: Arr, h: Vec<f64>) -> Result<Self> {
        if w.rank() != 2 || w.shape[0] != w.shape[1] || w.shape[0] != h.len() {
            return Err(Error::Shape(format!("quadratic W {:?} vs h {}", w.shape, h.len())));
        }
        if !w.is_finite() || !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("quadratic coefficients".into()));
        }
        Ok(QuadraticBinaryTarget { w, h })
    }

    pub fn zero(d: usize) -> Self {
        QuadraticBinaryTarget { w: Arr::zeros(vec![d, d]), h: vec![0.0; d] }
    }

    pub fn d(&self) -> usize {
        self.h.len()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!(QuadraticJson { d: self.d(), w: self.w.data.clone(), h: self.h.clone() })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let q: QuadraticJson = serde_json::from_value(v.clone())?;
        Self::new(Arr::matrix(q.d, q.d, q.w), q.h)
    }
}

impl Target for QuadraticBinaryTarget {
    fn dims(&self) -> (usize, usize) {
        (self.d(), 2)
    }

    fn log_unnorm(&self, x: &DiscreteState) -> f64 {
        let d = self.d();
        debug_assert_eq!(x.len(), d);
        let mut acc = 0.0;
        for i in 0..d {
            if x.tokens[i] == 0 {
                continue;
            }
            acc += self.h[i];
            let row = &self.w.data[i * d..(i + 1) * d];
            for j in 0..d {
                if x.tokens[j] != 0 {
                    acc += row[j];
                }
            }
        }
        acc
    }

    fn neighbor_log_ratios(&self, x: &DiscreteState) -> Arr {
        let d = self.d();
        let flips = quadratic_neighbor_log_ratios(&self.w, &self.h, x);
        let mut out = Arr::zeros(vec![d, 2]);
        for i in 0..d {
            let other = 1 - x.tokens[i] as usize;
            out.data[i * 2 + other] = flips[i];
        }
        out
    }
}

/// Closed-form single-flip log-ratios for a binary quadratic target:
/// entry `i` is `log rho(flip_i(x)) - log rho(x)`, vectorised as
/// `(1 - 2x) .* ((W + W^T) x - diag(W) + h)`.
pub fn quadratic_neighbor_log_ratios(w: &Arr, h: &[f64], x: &DiscreteState) -> Vec<f64> {
    let d = h.len();
    debug_assert_eq!(x.len(), d);
    let mut out = vec![0.0; d];
    for i in 0..d {
        let mut s = h[i] + w.data[i * d + i];
        for j in 0..d {
            if x.tokens[j] != 0 {
                s += w.data[i * d + j] + w.data[j * d + i];
            }
        }
        // remove the self terms counted when x_i = 1
        if x.tokens[i] != 0 {
            s -= 2.0 * w.data[i * d + i];
        }
        out[i] = (1.0 - 2.0 * x.tokens[i] as f64) * s;
    }
    out
}

/// Circular D x D lattice Ising model `log rho(s) = sigma * s^T A s` over
/// spins, carried internally in bit form plus the dropped constant.
#[derive(Clone, Debug)]
pub struct IsingLattice {
    pub side: usize,
    pub sigma: f64,
    pub quad: QuadraticBinaryTarget,
    /// `1^T J 1`, the constant separating bit and spin forms.
    pub log_const: f64,
    pub adjacency: Arr,
}

#[derive(Serialize, Deserialize)]
struct IsingJson {
    #[serde(rename = "D")]
    d: usize,
    sigma: f64,
}

impl IsingLattice {
    pub fn d(&self) -> usize {
        self.side * self.side
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!(IsingJson { d: self.side, sigma: self.sigma })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let j: IsingJson = serde_json::from_value(v.clone())?;
        make_ising(j.d, j.sigma)
    }
}

impl Target for IsingLattice {
    fn dims(&self) -> (usize, usize) {
        (self.d(), 2)
    }

    fn log_unnorm(&self, x: &DiscreteState) -> f64 {
        self.quad.log_unnorm(x) + self.log_const
    }

    fn neighbor_log_ratios(&self, x: &DiscreteState) -> Arr {
        self.quad.neighbor_log_ratios(x)
    }
}

/// Adjacency of the circular D x D grid (simple graph; wrap-around edges
/// deduplicated, which matters for D = 2).
pub fn circular_grid_adjacency(side: usize) -> Arr {
    let n = side * side;
    let mut a = Arr::zeros(vec![n, n]);
    let vid = |r: usize, c: usize| r * side + c;
    for r in 0..side {
        for c in 0..side {
            let u = vid(r, c);
            let right = vid(r, (c + 1) % side);
            let down = vid((r + 1) % side, c);
            for v in [right, down] {
                if u != v {
                    a.data[u * n + v] = 1.0;
                    a.data[v * n + u] = 1.0;
                }
            }
        }
    }
    a
}

/// Build the lattice Ising target with `J = sigma * A_D` re-expressed over
/// bits via `s = 2b - 1`: `W = 4J`, `h = -4 J 1`.
pub fn make_ising(side: usize, sigma: f64) -> Result<IsingLattice> {
    if side < 2 {
        return Err(Error::Domain("lattice side must be >= 2".into()));
    }
    let n = side * side;
    let a = circular_grid_adjacency(side);
    let mut w = Arr::zeros(vec![n, n]);
    let mut h = vec![0.0; n];
    let mut log_const = 0.0;
    for i in 0..n {
        let mut rowsum = 0.0;
        for j in 0..n {
            let jij = sigma * a.data[i * n + j];
            w.data[i * n + j] = 4.0 * jij;
            rowsum += jij;
        }
        h[i] = -4.0 * rowsum;
        log_const += rowsum;
    }
    Ok(IsingLattice { side, sigma, quad: QuadraticBinaryTarget::new(w, h)?, log_const, adjacency: a })
}

pub const GRAY_BITS: usize = 16;

/// Decode 16 binary-reflected Gray-code tokens (most significant first)
/// into a coordinate in `[lo, hi]`.
pub fn gray_decode(bits: &[u8], lo: f64, hi: f64) -> f64 {
    assert_eq!(bits.len(), GRAY_BITS, "gray_decode expects {GRAY_BITS} bits");
    let mut b = 0u32;
    let mut acc = 0u32;
    for &g in bits {
        b ^= g as u32;
        acc = (acc << 1) | b;
    }
    let max = (1u32 << GRAY_BITS) - 1;
    lo + (hi - lo) * acc as f64 / max as f64
}

/// Encode a coordinate to the nearest grid point as 16 Gray-code tokens
/// (most significant first). Inverse of [`gray_decode`] on grid points.
pub fn gray_encode(v: f64, lo: f64, hi: f64) -> Vec<u8> {
    let max = (1u32 << GRAY_BITS) - 1;
    let clamped = v.clamp(lo, hi);
    let k = ((clamped - lo) / (hi - lo) * max as f64).round() as u32;
    let g = k ^ (k >> 1);
    (0..GRAY_BITS).map(|i| ((g >> (GRAY_BITS - 1 - i)) & 1) as u8).collect()
}

/// The named 2-D toy densities used for Gray-code targets. The usual suite
/// fixes only the shapes, not the parameters; the parameterisations below
/// (component means, arc radii, bandwidths) are this crate's documented
/// conventions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toy2d {
    #[serde(rename = "2spirals")]
    TwoSpirals,
    #[serde(rename = "8gaussians")]
    EightGaussians,
    Circles,
    Moons,
    Pinwheel,
    #[serde(rename = "swissroll")]
    SwissRoll,
    Checkerboard,
    Rings,
    #[serde(rename = "25gaussians")]
    TwentyFiveGaussians,
}

impl Toy2d {
    pub fn from_name(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::Config(format!("unknown toy density {name}")))
    }

    pub fn name(&self) -> String {
        match serde_json::to_value(self).unwrap() {
            serde_json::Value::String(s) => s,
            _ => unreachable!(),
        }
    }

    /// Isotropic mixture components (mean, bandwidth), or None for the
    /// checkerboard which is a cell indicator.
    fn components(&self) -> Option<Vec<([f64; 2], f64)>> {
        use std::f64::consts::PI;
        let mut comps = Vec::new();
        match self {
            Toy2d::Checkerboard => return None,
            Toy2d::EightGaussians => {
                for k in 0..8 {
                    let a = 2.0 * PI * k as f64 / 8.0;
                    comps.push(([3.0 * a.cos(), 3.0 * a.sin()], 0.3));
                }
            }
            Toy2d::TwentyFiveGaussians => {
                for i in -2i32..=2 {
                    for j in -2i32..=2 {
                        comps.push(([1.5 * i as f64, 1.5 * j as f64], 0.2));
                    }
                }
            }
            Toy2d::Circles => {
                for &r in &[1.5, 3.0] {
                    for k in 0..64 {
                        let a = 2.0 * PI * k as f64 / 64.0;
                        comps.push(([r * a.cos(), r * a.sin()], 0.2));
                    }
                }
            }
            Toy2d::Rings => {
                for &r in &[0.9, 1.7, 2.5, 3.3] {
                    for k in 0..48 {
                        let a = 2.0 * PI * k as f64 / 48.0;
                        comps.push(([r * a.cos(), r * a.sin()], 0.15));
                    }
                }
            }
            Toy2d::Moons => {
                for k in 0..48 {
                    let a = PI * k as f64 / 47.0;
                    comps.push(([2.5 * a.cos() - 1.3, 2.5 * a.sin() - 0.6], 0.25));
                    comps.push(([2.5 * a.cos() + 1.3, -2.5 * a.sin() + 0.6], 0.25));
                }
            }
            Toy2d::TwoSpirals => {
                for k in 0..96 {
                    let u = k as f64 / 95.0;
                    let r = 3.5 * u;
                    let a = 3.0 * PI * u;
                    comps.push(([r * a.cos(), r * a.sin()], 0.2));
                    comps.push(([-r * a.cos(), -r * a.sin()], 0.2));
                }
            }
            Toy2d::Pinwheel => {
                for arm in 0..5 {
                    let base = 2.0 * PI * arm as f64 / 5.0;
                    for k in 0..24 {
                        let r = 0.5 + 2.7 * k as f64 / 23.0;
                        let a = base + 0.6 * (r - 0.5);
                        comps.push(([r * a.cos(), r * a.sin()], 0.2));
                    }
                }
            }
            Toy2d::SwissRoll => {
                for k in 0..96 {
                    let u = k as f64 / 95.0;
                    let r = 0.4 + 3.1 * u;
                    let a = 1.5 * PI + 3.0 * PI * u;
                    comps.push(([r * a.cos(), r * a.sin()], 0.2));
                }
            }
        }
        Some(comps)
    }

    /// Unnormalised density at a 2-D point, floored at 1e-300.
    pub fn density(&self, p: [f64; 2]) -> f64 {
        let v = match self.components() {
            None => {
                // checkerboard over [-4,4]^2, cells of side 2
                let inside = p[0].abs() <= 4.0 && p[1].abs() <= 4.0;
                if inside {
                    let cx = ((p[0] + 4.0) / 2.0).floor() as i64;
                    let cy = ((p[1] + 4.0) / 2.0).floor() as i64;
                    if (cx + cy) % 2 == 0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            }
            Some(comps) => {
                let mut acc = 0.0;
                for (mu, bw) in comps {
                    let dx = p[0] - mu[0];
                    let dy = p[1] - mu[1];
                    acc += (-(dx * dx + dy * dy) / (2.0 * bw * bw)).exp();
                }
                acc
            }
        };
        v.max(1e-300)
    }
}

/// 2-D toy density quantised through two 16-bit Gray codes: d = 32, S = 2.
#[derive(Clone, Debug)]
pub struct GrayCode2DTarget {
    pub density: Toy2d,
    pub lo: f64,
    pub hi: f64,
}

impl GrayCode2DTarget {
    pub fn new(density: Toy2d) -> Self {
        // typical support of the toy suite
        GrayCode2DTarget { density, lo: -4.0, hi: 4.0 }
    }

    pub fn decode(&self, x: &DiscreteState) -> [f64; 2] {
        let a = gray_decode(&x.tokens[..GRAY_BITS], self.lo, self.hi);
        let b = gray_decode(&x.tokens[GRAY_BITS..], self.lo, self.hi);
        [a, b]
    }

    pub fn encode(&self, p: [f64; 2]) -> DiscreteState {
        let mut tokens = gray_encode(p[0], self.lo, self.hi);
        tokens.extend(gray_encode(p[1], self.lo, self.hi));
        DiscreteState::new(tokens)
    }
}

impl Target for GrayCode2DTarget {
    fn dims(&self) -> (usize, usize) {
        (2 * GRAY_BITS, 2)
    }

    fn log_unnorm(&self, x: &DiscreteState) -> f64 {
        self.density.density(self.decode(x)).ln()
    }
}

/// Deep energy `log rho(x) = -E(x)` with E a 4-layer MLP (Swish hidden
/// activations); binary tokens are fed as 0/1 reals.
#[derive(Clone, Debug)]
pub struct MlpEnergy {
    pub store: ParamStore,
    pub d: usize,
    pub hidden: usize,
}

pub const MLP_ENERGY_PREFIX: &str = "mlp_ebm";

impl MlpEnergy {
    pub fn new(d: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        let mut store = ParamStore::new();
        let dims = [d, hidden, hidden, hidden, 1];
        for l in 0..4 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            store
                .insert(&format!("{MLP_ENERGY_PREFIX}.w{l}"), Arr::matrix(fan_in, fan_out, w))
                .unwrap();
            store
                .insert(&format!("{MLP_ENERGY_PREFIX}.b{l}"), Arr::zeros(vec![fan_out]))
                .unwrap();
        }
        MlpEnergy { store, d, hidden }
    }

    /// Energy forward pass for a batch of states, recorded on `tape` so the
    /// caller can differentiate. Returns the n x 1 output node.
    pub fn energy_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &[DiscreteState],
    ) -> Result<crate::tensor::NodeId> {
        let n = states.len();
        let mut data = Vec::with_capacity(n * self.d);
        for x in states {
            debug_assert_eq!(x.len(), self.d);
            data.extend(x.as_f64());
        }
        let mut cur = tape.constant(Arr::matrix(n, self.d, data));
        for l in 0..4 {
            let w = tape.param(store, &format!("{MLP_ENERGY_PREFIX}.w{l}"))?;
            let b = tape.param(store, &format!("{MLP_ENERGY_PREFIX}.b{l}"))?;
            let z = tape.matmul(cur, w)?;
            let z = tape.add(z, b)?;
            cur = if l < 3 { swish(tape, z)? } else { z };
        }
        Ok(cur)
    }

    pub fn energy_batch(&self, states: &[DiscreteState]) -> Vec<f64> {
        let mut tape = Tape::new();
        let out = self.energy_node(&mut tape, &self.store, states).expect("mlp forward");
        tape.value(out).data.clone()
    }
}

impl Target for MlpEnergy {
    fn dims(&self) -> (usize, usize) {
        (self.d, 2)
    }

    fn log_unnorm(&self, x: &DiscreteState) -> f64 {
        -self.energy_batch(std::slice::from_ref(x))[0]
    }

    fn neighbor_log_ratios(&self, x: &DiscreteState) -> Arr {
        // one batched forward over x and all d flips
        let mut batch = Vec::with_capacity(self.d + 1);
        batch.push(x.clone());
        for i in 0..self.d {
            batch.push(x.flip(i));
        }
        let e = self.energy_batch(&batch);
        let mut out = Arr::zeros(vec![self.d, 2]);
        for i in 0..self.d {
            let other = 1 - x.tokens[i] as usize;
            out.data[i * 2 + other] = e[0] - e[i + 1];
        }
        out
    }
}

/// `z * sigmoid(z)` composed from primitive ops, numerically stable via
/// `sigmoid(z) = exp(z - softplus(z))` with `softplus(z) = relu(z) + log(1 + exp(-|z|))`.
pub fn swish(tape: &mut Tape, z: crate::tensor::NodeId) -> Result<crate::tensor::NodeId> {
    let shape = tape.value(z).shape.clone();
    let negz = tape.neg(z)?;
    let rp = tape.relu(z)?;
    let rn = tape.relu(negz)?;
    let absz = tape.add(rp, rn)?;
    let negabs = tape.neg(absz)?;
    let e = tape.exp(negabs)?;
    let one = tape.constant(Arr::full(shape, 1.0));
    let onepe = tape.add(e, one)?;
    let lg = tape.log(onepe)?;
    let softplus = tape.add(rp, lg)?;
    let zminus = tape.sub(z, softplus)?;
    let sig = tape.exp(zminus)?;
    tape.mul(z, sig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_state(d: usize, rng: &mut ChaCha8Rng) -> DiscreteState {
        DiscreteState::new((0..d).map(|_| rng.random_range(0..2u8)).collect())
    }

    fn rand_quadratic(d: usize, rng: &mut ChaCha8Rng) -> QuadraticBinaryTarget {
        let w: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        QuadraticBinaryTarget::new(Arr::matrix(d, d, w), h).unwrap()
    }

    #[test]
    fn zero_quadratic_has_zero_log_density() {
        let q = QuadraticBinaryTarget::zero(4);
        let x = DiscreteState::new(vec![1, 0, 1, 1]);
        assert_eq!(q.log_unnorm(&x), 0.0);
    }

    #[test]
    fn linear_term_only() {
        let q = QuadraticBinaryTarget::new(Arr::zeros(vec![2, 2]), vec![1.0, 2.0]).unwrap();
        let x = DiscreteState::new(vec![1, 1]);
        assert_eq!(q.log_unnorm(&x), 3.0);
    }

    #[test]
    fn ising_all_up_spins_energy() {
        // all-ones bits = all-up spins; log rho = sigma * 1^T A 1
        let ising = make_ising(2, 0.1).unwrap();
        let ones = DiscreteState::new(vec![1; 4]);
        let expected = 0.1 * ising.adjacency.data.iter().sum::<f64>();
        assert!((ising.log_unnorm(&ones) - expected).abs() < 1e-12);
    }

    #[test]
    fn identity_neighbor_ratio_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_quadratic(6, &mut rng);
        let x = rand_state(6, &mut rng);
        let r = q.neighbor_log_ratios(&x);
        for i in 0..6 {
            assert_eq!(r.at(i, x.tokens[i] as usize), 0.0);
        }
    }

    #[test]
    fn closed_form_ratios_match_two_point_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = 10;
            let q = rand_quadratic(d, &mut rng);
            let x = rand_state(d, &mut rng);
            let fast = quadratic_neighbor_log_ratios(&q.w, &q.h, &x);
            for i in 0..d {
                let brute = q.log_unnorm(&x.flip(i)) - q.log_unnorm(&x);
                assert!((fast[i] - brute).abs() < 1e-12, "dim {i}: {} vs {brute}", fast[i]);
            }
        }
    }

    /// Forwards log_unnorm but forces the generic ratio path.
    struct GenericWrap<'a>(&'a QuadraticBinaryTarget);
    impl Target for GenericWrap<'_> {
        fn dims(&self) -> (usize, usize) {
            self.0.dims()
        }
        fn log_unnorm(&self, x: &DiscreteState) -> f64 {
            self.0.log_unnorm(x)
        }
    }

    #[test]
    fn closed_form_matches_generic_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let d = 12;
            let q = rand_quadratic(d, &mut rng);
            let x = rand_state(d, &mut rng);
            let fast = q.neighbor_log_ratios(&x);
            let slow = Target::neighbor_log_ratios(&GenericWrap(&q), &x);
            for k in 0..fast.numel() {
                assert!((fast.data[k] - slow.data[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_bit_ratio_example() {
        let q = QuadraticBinaryTarget::new(Arr::zeros(vec![1, 1]), vec![1.0]).unwrap();
        let x = DiscreteState::new(vec![0]);
        let r = quadratic_neighbor_log_ratios(&q.w, &q.h, &x);
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn ising_degree_is_uniform() {
        for side in [2usize, 3, 4] {
            let ising = make_ising(side, 0.1).unwrap();
            let n = side * side;
            let expected_degree = if side == 2 { 2.0 } else { 4.0 };
            for i in 0..n {
                let rowsum: f64 = (0..n).map(|j| ising.adjacency.data[i * n + j]).sum();
                assert_eq!(rowsum, expected_degree, "side {side} vertex {i}");
                let jrow: f64 = (0..n).map(|j| 0.1 * ising.adjacency.data[i * n + j]).sum();
                assert!((jrow - 0.1 * expected_degree).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_coupling_gives_flat_target() {
        let ising = make_ising(3, 0.0).unwrap();
        assert!(ising.quad.w.data.iter().all(|&v| v == 0.0));
        assert!(ising.quad.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ising_bit_and_spin_forms_differ_by_fixed_constant() {
        let ising = make_ising(3, 0.1).unwrap();
        let n = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // spin energy computed directly: sigma * s^T A s
        let spin_log = |x: &DiscreteState| -> f64 {
            let s: Vec<f64> = x.tokens.iter().map(|&b| 2.0 * b as f64 - 1.0).collect();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += s[i] * 0.1 * ising.adjacency.data[i * n + j] * s[j];
                }
            }
            acc
        };
        let x0 = rand_state(n, &mut rng);
        let c0 = ising.quad.log_unnorm(&x0) - spin_log(&x0);
        for _ in 0..10 {
            let x = rand_state(n, &mut rng);
            let c = ising.quad.log_unnorm(&x) - spin_log(&x);
            assert!((c - c0).abs() < 1e-10, "constant drifted: {c} vs {c0}");
        }
        // the stored constant closes the gap exactly
        assert!((ising.log_const + c0).abs() < 1e-10);
    }

    #[test]
    fn gray_decode_all_zeros_hits_lower_bound() {
        assert_eq!(gray_decode(&[0; 16], -4.0, 4.0), -4.0);
    }

    #[test]
    fn gray_decode_msb_only_hits_upper_bound() {
        let mut bits = [0u8; 16];
        bits[0] = 1; // gray 0b1000... decodes to all-ones binary = 65535
        assert_eq!(gray_decode(&bits, -4.0, 4.0), 4.0);
    }

    #[test]
    fn gray_decode_two_low_bits() {
        let mut bits = [0u8; 16];
        bits[14] = 1;
        bits[15] = 1; // gray 0b11 -> binary 0b10 = 2
        let expected = -4.0 + 2.0 * 8.0 / 65535.0;
        assert!((gray_decode(&bits, -4.0, 4.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn gray_round_trip_on_grid_points() {
        let t = GrayCode2DTarget::new(Toy2d::Rings);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = DiscreteState::new((0..32).map(|_| rng.random_range(0..2u8)).collect());
            let p = t.decode(&x);
            let back = t.encode(p);
            assert_eq!(back, x);
        }
    }

    #[test]
    fn toy_densities_are_finite_everywhere() {
        let all = [
            Toy2d::TwoSpirals,
            Toy2d::EightGaussians,
            Toy2d::Circles,
            Toy2d::Moons,
            Toy2d::Pinwheel,
            Toy2d::SwissRoll,
            Toy2d::Checkerboard,
            Toy2d::Rings,
            Toy2d::TwentyFiveGaussians,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for density in all {
            let t = GrayCode2DTarget::new(density);
            for _ in 0..20 {
                let x = DiscreteState::new((0..32).map(|_| rng.random_range(0..2u8)).collect());
                let v = t.log_unnorm(&x);
                assert!(v.is_finite(), "{:?} gave {v}", density);
            }
            assert_eq!(Toy2d::from_name(&density.name()).unwrap(), density);
        }
    }

    #[test]
    fn quadratic_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_quadratic(5, &mut rng);
        let q2 = QuadraticBinaryTarget::from_json(&q.to_json()).unwrap();
        assert_eq!(q.w.data, q2.w.data);
        assert_eq!(q.h, q2.h);
        let ising = make_ising(4, 0.25).unwrap();
        let ising2 = IsingLattice::from_json(&ising.to_json()).unwrap();
        assert_eq!(ising.quad.w.data, ising2.quad.w.data);
    }

    #[test]
    fn mlp_energy_neighbor_ratios_match_generic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mlp = MlpEnergy::new(6, 16, &mut rng);
        let x = rand_state(6, &mut rng);
        let fast = mlp.neighbor_log_ratios(&x);
        let base = mlp.log_unnorm(&x);
        for i in 0..6 {
            let brute = mlp.log_unnorm(&x.flip(i)) - base;
            let other = 1 - x.tokens[i] as usize;
            assert!((fast.at(i, other) - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn state_index_round_trip() {
        for idx in 0..81 {
            let x = DiscreteState::from_index(idx, 4, 3);
            assert_eq!(x.index(3), idx);
        }
    }
}
