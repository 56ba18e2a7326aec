//! Exact enumeration tools for small state spaces: partition functions and
//! their time derivatives, exact sampling, Kolmogorov residuals, a discrete
//! Stein-identity harness, and a nonnegative least-squares tabular rate
//! fitter used as a zero-loss reference.
//!
//! States are enumerated in little-endian lexicographic token order so all
//! cached arrays are reproducible.

use rand::Rng;

use crate::ctmc::RateModel;
use crate::path::{AnnealedPath, TimeGrid};
use crate::targets::DiscreteState;
use crate::tensor::Arr;
use crate::train;
use crate::{Error, Result};

const STATE_CAP: usize = 1 << 20;

/// Kahan-compensated sum.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Cached `log rho` over every state of a small space.
pub struct ExactEnumeration {
    pub d: usize,
    pub s: usize,
    pub log_rho: Vec<f64>,
}

impl ExactEnumeration {
    pub fn new(path: &AnnealedPath) -> Result<Self> {
        let (d, s) = path.dims();
        let count = (s as u128).checked_pow(d as u32).ok_or_else(|| cap_err(d, s))?;
        if count > STATE_CAP as u128 {
            return Err(cap_err(d, s));
        }
        let count = count as usize;
        let log_rho = (0..count)
            .map(|idx| path.target.log_unnorm(&DiscreteState::from_index(idx, d, s)))
            .collect();
        Ok(ExactEnumeration { d, s, log_rho })
    }

    pub fn state(&self, idx: usize) -> DiscreteState {
        DiscreteState::from_index(idx, self.d, self.s)
    }

    pub fn num_states(&self) -> usize {
        self.log_rho.len()
    }

    /// `log Z_t = logsumexp_x beta(t) log rho(x)`.
    pub fn log_z(&self, path: &AnnealedPath, t: f64) -> f64 {
        let beta = path.schedule.beta(t);
        let max = self.log_rho.iter().map(|lr| beta * lr).fold(f64::NEG_INFINITY, f64::max);
        let sum = kahan_sum(self.log_rho.iter().map(|lr| (beta * lr - max).exp()));
        max + sum.ln()
    }

    /// Normalised probabilities of `p_t`.
    pub fn probs(&self, path: &AnnealedPath, t: f64) -> Vec<f64> {
        let beta = path.schedule.beta(t);
        let log_z = self.log_z(path, t);
        self.log_rho.iter().map(|lr| (beta * lr - log_z).exp()).collect()
    }

    /// Exact `d/dt log Z_t = E_{p_t}[beta'(t) log rho]`.
    pub fn dt_log_z(&self, path: &AnnealedPath, t: f64) -> f64 {
        let probs = self.probs(path, t);
        let dbeta = path.schedule.dbeta(t);
        kahan_sum(probs.iter().zip(&self.log_rho).map(|(p, lr)| p * dbeta * lr))
    }

    /// Inverse-CDF sampling from the enumerated `p_t`.
    pub fn sample(&self, path: &AnnealedPath, t: f64, count: usize, rng: &mut impl Rng) -> Vec<DiscreteState> {
        let probs = self.probs(path, t);
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                let idx = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                self.state(idx)
            })
            .collect()
    }

    /// Exact total-variation distance between empirical samples and `p_t`.
    pub fn tv_distance(&self, path: &AnnealedPath, t: f64, samples: &[DiscreteState]) -> f64 {
        let probs = self.probs(path, t);
        let mut counts = vec![0usize; probs.len()];
        for x in samples {
            counts[x.index(self.s)] += 1;
        }
        let n = samples.len() as f64;
        0.5 * probs
            .iter()
            .zip(&counts)
            .map(|(p, &c)| (p - c as f64 / n).abs())
            .sum::<f64>()
    }

    /// Max over states of `|xi_t(x) - d/dt log Z_t|`: zero iff the model
    /// satisfies the Kolmogorov equation at t on the flip neighbourhood.
    pub fn kolmogorov_residual(&self, path: &AnnealedPath, model: &dyn RateModel, t: f64) -> Result<f64> {
        let dt_log_z = self.dt_log_z(path, t);
        let mut worst: f64 = 0.0;
        for idx in 0..self.num_states() {
            let x = self.state(idx);
            let xi = train::xi(path, model, t, &x)?;
            worst = worst.max((xi - dt_log_z).abs());
        }
        Ok(worst)
    }

    /// Unweighted mean and standard deviation of `xi_t` over all states.
    pub fn xi_stats(&self, path: &AnnealedPath, model: &dyn RateModel, t: f64) -> Result<(f64, f64)> {
        let n = self.num_states();
        let mut vals = Vec::with_capacity(n);
        for idx in 0..n {
            vals.push(train::xi(path, model, t, &self.state(idx))?);
        }
        let mean = kahan_sum(vals.iter().copied()) / n as f64;
        let var = kahan_sum(vals.iter().map(|v| (v - mean) * (v - mean))) / n as f64;
        Ok((mean, var.sqrt()))
    }

    /// Discrete Stein identity harness: `E_{p_t} sum_y R(x,y) p_t(y)/p_t(x)`
    /// for the one-way rates `[g]_+` produced by `g_fn`, evaluated by full
    /// enumeration. Exactly zero for any conservative rate matrix.
    pub fn stein_expectation<F>(&self, path: &AnnealedPath, t: f64, g_fn: F) -> f64
    where
        F: Fn(&DiscreteState) -> Arr,
    {
        let probs = self.probs(path, t);
        let n = self.num_states();
        // cache rates for every state once
        let rates: Vec<Arr> = (0..n)
            .map(|idx| {
                let mut g = g_fn(&self.state(idx));
                for v in g.data.iter_mut() {
                    *v = v.max(0.0);
                }
                g
            })
            .collect();
        let mut terms = Vec::new();
        for idx in 0..n {
            let x = self.state(idx);
            for i in 0..self.d {
                for tau in 0..self.s as u8 {
                    if tau == x.tokens[i] {
                        continue;
                    }
                    let y = x.swap(i, tau);
                    let yidx = y.index(self.s);
                    // inflow y -> x weighted by p(y), outflow x -> y weighted by p(x)
                    terms.push(rates[yidx].at(i, x.tokens[i] as usize) * probs[yidx]);
                    terms.push(-rates[idx].at(i, tau as usize) * probs[idx]);
                }
            }
        }
        kahan_sum(terms.into_iter())
    }
}

fn cap_err(d: usize, s: usize) -> Error {
    Error::Domain(format!("state space {s}^{d} exceeds the enumeration cap {STATE_CAP}"))
}

/// Per-grid-time tabular one-way flip rates over an enumerable space.
pub struct TabularRates {
    pub d: usize,
    pub s: usize,
    pub grid: TimeGrid,
    /// `rates[k][state_index]` is the d x S nonnegative flip-rate matrix.
    pub rates: Vec<Vec<Arr>>,
    /// Squared Kolmogorov residual left by the fit at each grid time.
    pub residuals: Vec<f64>,
}

impl RateModel for TabularRates {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.s)
    }

    fn g_values(&self, t: f64, x: &DiscreteState) -> Arr {
        let k = (t * self.grid.steps as f64).round() as usize;
        self.rates[k.min(self.grid.steps)][x.index(self.s)].clone()
    }

    fn rates_pair(&self, t: f64, x: &DiscreteState) -> (Arr, Arr) {
        let k = ((t * self.grid.steps as f64).round() as usize).min(self.grid.steps);
        let fwd = self.rates[k][x.index(self.s)].clone();
        let mut rev = Arr::zeros(vec![self.d, self.s]);
        for i in 0..self.d {
            for tau in 0..self.s as u8 {
                if tau == x.tokens[i] {
                    continue;
                }
                let y = x.swap(i, tau);
                rev.data[i * self.s + tau as usize] =
                    self.rates[k][y.index(self.s)].at(i, x.tokens[i] as usize);
            }
        }
        (fwd, rev)
    }
}

/// Fit nonnegative tabular flip rates minimising the summed squared
/// Kolmogorov residual at every grid time, by projected gradient descent,
/// then cancel two-way flows pairwise (a residual-preserving reduction)
/// so the result is one-way.
pub fn fit_tabular_rates(path: &AnnealedPath, grid: &TimeGrid) -> Result<TabularRates> {
    let (d, s) = path.dims();
    let n = (s as f64).powi(d as i32) as usize;
    if n > 256 {
        return Err(Error::Domain("tabular fitting is limited to 256 states".into()));
    }
    let enumeration = ExactEnumeration::new(path)?;
    let mut per_time = Vec::with_capacity(grid.len());
    let mut residuals = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let t = grid.time(k);
        let (rates, res) = fit_one_time(path, &enumeration, t, d, s, n);
        per_time.push(rates);
        residuals.push(res);
    }
    Ok(TabularRates { d, s, grid: grid.clone(), rates: per_time, residuals })
}

fn fit_one_time(
    path: &AnnealedPath,
    enumeration: &ExactEnumeration,
    t: f64,
    d: usize,
    s: usize,
    n: usize,
) -> (Vec<Arr>, f64) {
    let probs = enumeration.probs(path, t);
    let dt_log_z = enumeration.dt_log_z(path, t);
    // target: c(x) = d/dt log p_t(x)
    let target: Vec<f64> = (0..n)
        .map(|idx| path.dt_log_p_tilde(t, &enumeration.state(idx)) - dt_log_z)
        .collect();

    // variables: rate (state, i, tau != x_i); flattened index
    let nv = n * d * (s - 1);
    let var_index = |state: usize, i: usize, tau: u8, x: &DiscreteState| -> usize {
        let slot = if (tau as usize) < x.tokens[i] as usize { tau as usize } else { tau as usize - 1 };
        (state * d + i) * (s - 1) + slot
    };

    // residual(x) = sum_i,tau [ r(y,i,x_i) p(y)/p(x) - r(x,i,tau) ] - c(x)
    // precompute sparse rows
    struct Row {
        cols: Vec<usize>,
        coeffs: Vec<f64>,
    }
    let mut rows = Vec::with_capacity(n);
    for idx in 0..n {
        let x = enumeration.state(idx);
        let mut cols = Vec::new();
        let mut coeffs = Vec::new();
        for i in 0..d {
            for tau in 0..s as u8 {
                if tau == x.tokens[i] {
                    continue;
                }
                let y = x.swap(i, tau);
                let yidx = y.index(s);
                cols.push(var_index(yidx, i, x.tokens[i], &y));
                coeffs.push(probs[yidx] / probs[idx]);
                cols.push(var_index(idx, i, tau, &x));
                coeffs.push(-1.0);
            }
        }
        rows.push(Row { cols, coeffs });
    }

    // projected gradient; the squared Frobenius norm bounds the top
    // singular value, so the step is always stable
    let mut r = vec![0.0; nv];
    let apply = |r: &[f64], out: &mut [f64]| {
        for (row, o) in rows.iter().zip(out.iter_mut()) {
            let mut acc = 0.0;
            for (c, w) in row.cols.iter().zip(&row.coeffs) {
                acc += w * r[*c];
            }
            *o = acc;
        }
    };
    let apply_t = |res: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (row, rv) in rows.iter().zip(res.iter()) {
            for (c, w) in row.cols.iter().zip(&row.coeffs) {
                out[*c] += w * rv;
            }
        }
    };
    let frob_sq: f64 = rows.iter().flat_map(|row| row.coeffs.iter().map(|c| c * c)).sum();
    let step = 1.0 / frob_sq.max(1e-12);
    let mut res = vec![0.0; n];
    let mut grad = vec![0.0; nv];
    for _ in 0..400_000 {
        apply(&r, &mut res);
        for (rv, tv) in res.iter_mut().zip(&target) {
            *rv -= tv;
        }
        apply_t(&res, &mut grad);
        let mut moved = 0.0f64;
        for (ri, gi) in r.iter_mut().zip(&grad) {
            let next = (*ri - step * gi).max(0.0);
            moved = moved.max((next - *ri).abs());
            *ri = next;
        }
        if moved < 1e-15 {
            break;
        }
    }

    // pairwise one-way reduction: lowering r(x->y) by delta and r(y->x) by
    // delta * p(x)/p(y) leaves every residual unchanged
    for idx in 0..n {
        let x = enumeration.state(idx);
        for i in 0..d {
            for tau in 0..s as u8 {
                if tau == x.tokens[i] || (tau as usize) < x.tokens[i] as usize {
                    continue;
                }
                let y = x.swap(i, tau);
                let yidx = y.index(s);
                let fwd_ix = var_index(idx, i, tau, &x);
                let bwd_ix = var_index(yidx, i, x.tokens[i], &y);
                let fwd = r[fwd_ix];
                let bwd = r[bwd_ix];
                if fwd > 0.0 && bwd > 0.0 {
                    let ratio = probs[yidx] / probs[idx];
                    let delta = fwd.min(bwd * ratio);
                    r[fwd_ix] = fwd - delta;
                    r[bwd_ix] = bwd - delta / ratio;
                }
            }
        }
    }

    apply(&r, &mut res);
    let mut sq = 0.0;
    for (rv, tv) in res.iter().zip(&target) {
        sq += (rv - tv) * (rv - tv);
    }

    let mut mats = Vec::with_capacity(n);
    for idx in 0..n {
        let x = enumeration.state(idx);
        let mut m = Arr::zeros(vec![d, s]);
        for i in 0..d {
            for tau in 0..s as u8 {
                if tau == x.tokens[i] {
                    continue;
                }
                m.data[i * s + tau as usize] = r[var_index(idx, i, tau, &x)];
            }
        }
        mats.push(m);
    }
    (mats, sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::ZeroRates;
    use crate::path::Schedule;
    use crate::targets::{make_ising, QuadraticBinaryTarget, UniformTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn uniform_path(d: usize) -> AnnealedPath {
        AnnealedPath::linear(Arc::new(UniformTarget { d, s: 2 }))
    }

    fn quad_path(seed: u64, d: usize, scale: f64) -> AnnealedPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d * d).map(|_| rng.random_range(-scale..scale)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let q = QuadraticBinaryTarget::new(Arr::matrix(d, d, w), h).unwrap();
        // oracle work wants exact ratios; keep the clip out of reach
        AnnealedPath::new(Arc::new(q), Schedule::Linear, 1e6).unwrap()
    }

    #[test]
    fn flat_log_z_is_d_log_s() {
        let path = uniform_path(6);
        let e = ExactEnumeration::new(&path).unwrap();
        assert!((e.log_z(&path, 0.0) - 6.0 * 2.0f64.ln()).abs() < 1e-12);
        assert!((e.log_z(&path, 1.0) - 6.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_bit_log_z_closed_form() {
        let q = QuadraticBinaryTarget::new(Arr::zeros(vec![1, 1]), vec![1.0]).unwrap();
        let path = AnnealedPath::linear(Arc::new(q));
        let e = ExactEnumeration::new(&path).unwrap();
        let expect = (1.0 + 1.0f64.exp()).ln();
        assert!((e.log_z(&path, 1.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn ising_3x3_log_z_is_finite_and_stable() {
        let path = AnnealedPath::linear(Arc::new(make_ising(3, 0.1).unwrap()));
        let e = ExactEnumeration::new(&path).unwrap();
        assert_eq!(e.num_states(), 512);
        let z1 = e.log_z(&path, 1.0);
        assert!(z1.is_finite());
        // normalisation: sum exp(log p~ - log Z) = 1
        let total: f64 = e.probs(&path, 1.0).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dt_log_z_vanishes_on_flat_target() {
        let path = uniform_path(4);
        let e = ExactEnumeration::new(&path).unwrap();
        for t in [0.0, 0.5, 1.0] {
            assert_eq!(e.dt_log_z(&path, t), 0.0);
        }
    }

    #[test]
    fn dt_log_z_matches_finite_difference() {
        let path = quad_path(1, 6, 0.5);
        let e = ExactEnumeration::new(&path).unwrap();
        for t in [0.2, 0.5, 0.8] {
            let eps = 1e-5;
            let fd = (e.log_z(&path, t + eps) - e.log_z(&path, t - eps)) / (2.0 * eps);
            let an = e.dt_log_z(&path, t);
            assert!((fd - an).abs() < 1e-6, "t={t}: {fd} vs {an}");
        }
    }

    #[test]
    fn exact_sampling_matches_uniform_frequencies() {
        let path = uniform_path(3);
        let e = ExactEnumeration::new(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = e.sample(&path, 0.5, 16_000, &mut rng);
        let mut counts = vec![0usize; 8];
        for x in &samples {
            counts[x.index(2)] += 1;
        }
        let expect = 2000.0;
        let se3 = 3.0 * (16_000.0f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for &c in &counts {
            assert!((c as f64 - expect).abs() < se3, "count {c}");
        }
    }

    #[test]
    fn exact_sampling_concentrates_at_low_temperature() {
        // strong field pushes every bit to one
        let q = QuadraticBinaryTarget::new(Arr::zeros(vec![4, 4]), vec![30.0; 4]).unwrap();
        let path = AnnealedPath::new(Arc::new(q), Schedule::Linear, 1e6).unwrap();
        let e = ExactEnumeration::new(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for x in e.sample(&path, 1.0, 50, &mut rng) {
            assert_eq!(x.tokens, vec![1, 1, 1, 1]);
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let path = quad_path(4, 5, 0.4);
        let e = ExactEnumeration::new(&path).unwrap();
        let mut a_rng = ChaCha8Rng::seed_from_u64(5);
        let mut b_rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(e.sample(&path, 0.7, 64, &mut a_rng), e.sample(&path, 0.7, 64, &mut b_rng));
    }

    #[test]
    fn residual_is_zero_for_zero_model_on_flat_target() {
        let path = uniform_path(4);
        let e = ExactEnumeration::new(&path).unwrap();
        let model = ZeroRates { d: 4, s: 2 };
        for t in [0.0, 0.5, 1.0] {
            assert_eq!(e.kolmogorov_residual(&path, &model, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn stein_expectation_vanishes_for_random_rates() {
        let path = quad_path(6, 8, 0.5);
        let e = ExactEnumeration::new(&path).unwrap();
        let mut worst: f64 = 0.0;
        for trial in 0..5 {
            let seed = 100 + trial;
            let g_fn = move |x: &DiscreteState| -> Arr {
                // deterministic pseudo-random rates keyed by the state
                let mut g = Arr::zeros(vec![8, 2]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + x.index(2) as u64);
                for i in 0..8 {
                    for tau in 0..2u8 {
                        if tau != x.tokens[i] {
                            g.data[i * 2 + tau as usize] = rng.random_range(-1.0..2.0);
                        }
                    }
                }
                g
            };
            for t in [0.3, 1.0] {
                worst = worst.max(e.stein_expectation(&path, t, g_fn).abs());
            }
        }
        assert!(worst < 1e-10, "stein residual {worst}");
    }

    #[test]
    fn two_state_fit_matches_the_closed_form_single_rate() {
        // d=1: the Kolmogorov equation has a one-parameter solution family;
        // the one-way reduction pins the single-rate member
        let q = QuadraticBinaryTarget::new(Arr::zeros(vec![1, 1]), vec![1.3]).unwrap();
        let path = AnnealedPath::new(Arc::new(q), Schedule::Linear, 1e6).unwrap();
        let grid = TimeGrid::new(4).unwrap();
        let fit = fit_tabular_rates(&path, &grid).unwrap();
        let e = ExactEnumeration::new(&path).unwrap();
        for k in 0..grid.len() {
            let t = grid.time(k);
            assert!(fit.residuals[k] < 1e-16, "residual {}", fit.residuals[k]);
            // closed form: dp1/dt = p0 p1 (dlogp1 - dlogp0 ... ) net flow f = dp1/dt
            let probs = e.probs(&path, t);
            let dt_log_z = e.dt_log_z(&path, t);
            let dp1 = probs[1] * (path.dt_log_p_tilde(t, &e.state(1)) - dt_log_z);
            let r_up = fit.rates[k][0].at(0, 1);
            let r_down = fit.rates[k][1].at(0, 0);
            if dp1 > 0.0 {
                assert!((r_up * probs[0] - dp1).abs() < 1e-8, "up-rate mismatch");
                assert!(r_down.abs() < 1e-8, "one-way violated");
            } else {
                assert!((r_down * probs[1] + dp1).abs() < 1e-8);
                assert!(r_up.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn flat_target_fit_returns_zero_rates() {
        let path = uniform_path(2);
        let grid = TimeGrid::new(2).unwrap();
        let fit = fit_tabular_rates(&path, &grid).unwrap();
        for k in 0..grid.len() {
            for m in &fit.rates[k] {
                assert!(m.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn fitted_rates_leave_tiny_kolmogorov_residual() {
        let path = quad_path(8, 2, 0.5);
        let grid = TimeGrid::new(8).unwrap();
        let fit = fit_tabular_rates(&path, &grid).unwrap();
        let e = ExactEnumeration::new(&path).unwrap();
        for k in 0..grid.len() {
            let res = e.kolmogorov_residual(&path, &fit, grid.time(k)).unwrap();
            assert!(res < 1e-8, "k={k}: residual {res}");
            let (_, sd) = e.xi_stats(&path, &fit, grid.time(k)).unwrap();
            assert!(sd < 1e-6, "k={k}: xi sd {sd}");
        }
    }
}
