//! Importance-sampling inference on simulated trajectories: normalised
//! weights, effective sample size, log-partition estimates, self-normalised
//! expectations, and a reverse-chain variational bound on data likelihood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::ctmc::{euler_step, RateModel, Trajectory};
use crate::path::{AnnealedPath, TimeGrid};
use crate::targets::DiscreteState;
use crate::{Error, Result};

/// Max-subtracted softmax of log-weights; tolerates -inf entries.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::Domain("no weights".into()));
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain("all log-weights are -inf".into()));
    }
    let mut w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    Ok(w)
}

/// States with raw and normalised importance weights.
#[derive(Clone, Debug)]
pub struct WeightedSampleSet {
    pub states: Vec<DiscreteState>,
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl WeightedSampleSet {
    pub fn new(states: Vec<DiscreteState>, log_weights: Vec<f64>) -> Result<Self> {
        if states.len() != log_weights.len() {
            return Err(Error::Shape("states/weights length mismatch".into()));
        }
        let normalized = normalize_log_weights(&log_weights)?;
        Ok(WeightedSampleSet { states, log_weights, normalized })
    }

    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        Self::new(
            trajs.iter().map(|t| t.final_state().clone()).collect(),
            trajs.iter().map(|t| t.log_weight).collect(),
        )
    }

    pub fn ess(&self) -> f64 {
        let k = self.normalized.len() as f64;
        1.0 / (k * self.normalized.iter().map(|w| w * w).sum::<f64>())
    }
}

/// Normalised effective sample size `1 / (K sum w~^2)` in (0, 1].
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let w = normalize_log_weights(log_weights)?;
    let k = w.len() as f64;
    Ok(1.0 / (k * w.iter().map(|v| v * v).sum::<f64>()))
}

/// `sum_k w~_k value_k`.
pub fn self_normalized_expectation(set: &WeightedSampleSet, values: &[f64]) -> Result<f64> {
    if values.len() != set.normalized.len() {
        return Err(Error::Shape("values/weights length mismatch".into()));
    }
    Ok(set.normalized.iter().zip(values).map(|(w, v)| w * v).sum())
}

/// `log Z_1` estimate: `log_z0 + logsumexp(w) - log K` over trajectory
/// log-weights. For the uniform prior `log_z0 = d log S`.
pub fn estimate_log_z(trajs: &[Trajectory], log_z0: f64) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Domain("no trajectories".into()));
    }
    let max = trajs.iter().map(|t| t.log_weight).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain("all trajectory weights are -inf".into()));
    }
    let sum: f64 = trajs.iter().map(|t| (t.log_weight - max).exp()).sum();
    Ok(log_z0 + max + sum.ln() - (trajs.len() as f64).ln())
}

/// Secondary diagnostic: the self-normalised estimate of
/// `E_{p_1}[log p~_1]`, a lower bound on `log Z_1` that is loose by the
/// entropy of `p_1`. Reported alongside, never substituted for, the
/// primary estimator.
pub fn log_z_lower_bound_diagnostic(path: &AnnealedPath, trajs: &[Trajectory]) -> Result<f64> {
    let set = WeightedSampleSet::from_trajectories(trajs)?;
    let values: Vec<f64> = set
        .states
        .iter()
        .map(|x| path.log_p_tilde(1.0, x))
        .collect::<Result<_>>()?;
    self_normalized_expectation(&set, &values)
}

#[derive(Clone, Debug, Serialize)]
pub struct ElboReport {
    pub mean_elbo: f64,
    pub mean_nll: f64,
    pub per_datum: Vec<f64>,
}

/// Reverse-chain variational bound. Each datum is carried from t = 1 back
/// to t = 0 under the reverse rates `[-G(tau,i|x)]_+ e^{ratio}`; the
/// accumulated log Radon-Nikodym ratio plus `log p_0(x_0)` lower-bounds the
/// model log-likelihood. Returns the mean negative bound per datum.
pub fn elbo_nll(
    model: &dyn RateModel,
    path: &AnnealedPath,
    grid: &TimeGrid,
    data: &[DiscreteState],
    seed: u64,
) -> Result<ElboReport> {
    if data.is_empty() {
        return Err(Error::Domain("no data".into()));
    }
    let (d, s) = model.dims();
    let dt = grid.dt();
    let log_p0 = -(d as f64) * (s as f64).ln();
    let mut per_datum = Vec::with_capacity(data.len());
    for (j, datum) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        let mut x = datum.clone();
        let mut acc = 0.0;
        for k in (1..=grid.steps).rev() {
            let t = grid.time(k);
            let (fwd, rev) = model.rates_pair(t, &x);
            let ratios = path.neighbor_log_ratios(t, &x);
            // integrand of the forward/backward diagonal difference
            let mut a_term = 0.0;
            let mut rev_rates = rev.clone();
            for idx in 0..ratios.numel() {
                let rho = ratios.data[idx].exp();
                a_term += fwd.data[idx] - rev.data[idx] * rho;
                rev_rates.data[idx] *= rho;
            }
            acc -= dt * a_term;
            let (next, jump) = euler_step(&rev_rates, &x, dt, &mut rng);
            if let Some((i, _old, new)) = jump {
                // jump term: minus the (clipped) log-ratio of the executed flip
                acc -= ratios.at(i, new as usize);
            }
            x = next;
        }
        if !acc.is_finite() {
            return Err(Error::NonFinite(format!("elbo accumulation for datum {j}")));
        }
        per_datum.push(acc + log_p0);
    }
    let mean_elbo = per_datum.iter().sum::<f64>() / per_datum.len() as f64;
    Ok(ElboReport { mean_elbo, mean_nll: -mean_elbo, per_datum })
}

/// Evaluation summary written by the CLI.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub ess: f64,
    pub log_z_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_z_exact: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_z_lower_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{simulate, ZeroRates};
    use crate::targets::UniformTarget;
    use std::sync::Arc;

    #[test]
    fn equal_weights_have_full_ess() {
        assert_eq!(ess(&[0.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_weights_have_ess_one_over_k() {
        let e = ess(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!((e - 0.25).abs() < 1e-15);
    }

    #[test]
    fn two_point_ess_formula() {
        let e = ess(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((e - 0.8).abs() < 1e-12, "got {e}");
    }

    #[test]
    fn ess_is_shift_invariant() {
        let base = [0.3, -1.2, 0.7, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.4).collect();
        let a = ess(&base).unwrap();
        let b = ess(&shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn all_minus_infinity_rejected() {
        assert!(ess(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn expectation_with_equal_weights_is_plain_mean() {
        let states = (0..4).map(|i| DiscreteState::new(vec![i as u8])).collect();
        let set = WeightedSampleSet::new(states, vec![0.0; 4]).unwrap();
        let v = self_normalized_expectation(&set, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
    }

    #[test]
    fn dominant_weight_takes_over() {
        let states = (0..3).map(|i| DiscreteState::new(vec![i as u8])).collect();
        let set = WeightedSampleSet::new(states, vec![0.0, 200.0, 0.0]).unwrap();
        let v = self_normalized_expectation(&set, &[5.0, -7.0, 9.0]).unwrap();
        assert!((v + 7.0).abs() < 1e-12);
    }

    #[test]
    fn log_z_estimate_is_exact_for_flat_target_and_zero_model() {
        let path = AnnealedPath::linear(Arc::new(UniformTarget { d: 2, s: 2 }));
        let grid = TimeGrid::new(4).unwrap();
        let model = ZeroRates { d: 2, s: 2 };
        let trajs = simulate(&model, &path, &grid, 64, 3, 1);
        let est = estimate_log_z(&trajs, path.log_z0()).unwrap();
        assert!((est - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_z_estimate_ignores_trajectory_order() {
        let path = AnnealedPath::linear(Arc::new(UniformTarget { d: 3, s: 2 }));
        let grid = TimeGrid::new(4).unwrap();
        let model = ZeroRates { d: 3, s: 2 };
        let mut trajs = simulate(&model, &path, &grid, 16, 5, 1);
        // perturb weights to make ordering matter if mishandled
        for (i, t) in trajs.iter_mut().enumerate() {
            t.log_weight = (i as f64 * 0.37).sin();
        }
        let a = estimate_log_z(&trajs, 0.0).unwrap();
        trajs.reverse();
        let b = estimate_log_z(&trajs, 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn elbo_equals_prior_likelihood_for_zero_model_on_flat_target() {
        let d = 5;
        let path = AnnealedPath::linear(Arc::new(UniformTarget { d, s: 2 }));
        let grid = TimeGrid::new(8).unwrap();
        let model = ZeroRates { d, s: 2 };
        let data = vec![DiscreteState::new(vec![1, 0, 1, 1, 0]); 3];
        let rep = elbo_nll(&model, &path, &grid, &data, 7).unwrap();
        let expect = d as f64 * 2.0f64.ln();
        assert!((rep.mean_nll - expect).abs() < 1e-12);
    }

    #[test]
    fn elbo_is_deterministic_under_seed() {
        let d = 4;
        let path = AnnealedPath::linear(Arc::new(UniformTarget { d, s: 2 }));
        let grid = TimeGrid::new(8).unwrap();
        struct Nudge;
        impl RateModel for Nudge {
            fn dims(&self) -> (usize, usize) {
                (4, 2)
            }
            fn g_values(&self, t: f64, x: &DiscreteState) -> crate::tensor::Arr {
                let mut g = crate::tensor::Arr::zeros(vec![4, 2]);
                for i in 0..4 {
                    g.data[i * 2 + (1 - x.tokens[i]) as usize] = 0.4 * (1.0 - t);
                }
                g
            }
        }
        let data: Vec<DiscreteState> =
            (0..6).map(|i| DiscreteState::from_index(i * 2 + 1, 4, 2)).collect();
        let a = elbo_nll(&Nudge, &path, &grid, &data, 11).unwrap();
        let b = elbo_nll(&Nudge, &path, &grid, &data, 11).unwrap();
        assert_eq!(a.mean_nll.to_bits(), b.mean_nll.to_bits());
    }
}
