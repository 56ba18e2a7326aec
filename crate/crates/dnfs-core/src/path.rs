//! Annealed probability path `p~_t = rho^{beta(t)} * eta^{1 - beta(t)}`
//! from a uniform prior to the target, with its time derivative and
//! time-indexed neighbourhood log-ratios.
//!
//! The prior is fixed to uniform (`log eta = 0`), which anchors the
//! log-partition at `log Z_0 = d log S`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::targets::{DiscreteState, Target};
use crate::tensor::Arr;
use crate::{Error, Result};

/// Annealing schedule `beta: [0,1] -> [0,1]`, monotone with beta(0)=0, beta(1)=1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Linear,
    Cosine,
}

impl Schedule {
    pub fn beta(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
        }
    }

    pub fn dbeta(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Cosine => 0.5 * std::f64::consts::PI * (std::f64::consts::PI * t).sin(),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
        }
    }
}

pub const DEFAULT_RATIO_CLIP: f64 = 5.0;

/// Target/prior pair with schedule and the one-sided upper clip applied to
/// log-ratios before exponentiation.
#[derive(Clone)]
pub struct AnnealedPath {
    pub target: Arc<dyn Target>,
    pub schedule: Schedule,
    pub clip: f64,
}

impl AnnealedPath {
    pub fn new(target: Arc<dyn Target>, schedule: Schedule, clip: f64) -> Result<Self> {
        if clip <= 0.0 {
            return Err(Error::Domain("ratio clip must be positive".into()));
        }
        Ok(AnnealedPath { target, schedule, clip })
    }

    pub fn linear(target: Arc<dyn Target>) -> Self {
        AnnealedPath { target, schedule: Schedule::Linear, clip: DEFAULT_RATIO_CLIP }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.target.dims()
    }

    /// `log Z_0 = d log S` for the uniform prior.
    pub fn log_z0(&self) -> f64 {
        let (d, s) = self.dims();
        d as f64 * (s as f64).ln()
    }

    /// `log p~_t(x) = beta(t) log rho(x)` (uniform prior contributes zero).
    pub fn log_p_tilde(&self, t: f64, x: &DiscreteState) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0,1]")));
        }
        Ok(self.schedule.beta(t) * self.target.log_unnorm(x))
    }

    /// `d/dt log p~_t(x) = beta'(t) log rho(x)`.
    pub fn dt_log_p_tilde(&self, t: f64, x: &DiscreteState) -> f64 {
        self.schedule.dbeta(t) * self.target.log_unnorm(x)
    }

    /// Unclipped d x S neighbourhood log-ratios of `p~_t` around `x`.
    pub fn neighbor_log_ratios_unclipped(&self, t: f64, x: &DiscreteState) -> Arr {
        let beta = self.schedule.beta(t);
        let mut r = self.target.neighbor_log_ratios(x);
        for v in r.data.iter_mut() {
            *v *= beta;
        }
        r
    }

    /// Neighbourhood log-ratios with the one-sided upper clip applied
    /// entrywise. The identity column stays exactly zero.
    pub fn neighbor_log_ratios(&self, t: f64, x: &DiscreteState) -> Arr {
        self.neighbor_log_ratios_clipped(t, x, self.clip)
    }

    pub fn neighbor_log_ratios_clipped(&self, t: f64, x: &DiscreteState, clip: f64) -> Arr {
        let mut r = self.neighbor_log_ratios_unclipped(t, x);
        for v in r.data.iter_mut() {
            if *v > clip {
                *v = clip;
            }
        }
        r
    }
}

/// K+1 evenly spaced times `t_k = k / K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { steps })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }

    /// Number of grid points (K + 1).
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.time(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{QuadraticBinaryTarget, UniformTarget};
    use crate::tensor::Arr;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quad_path(seed: u64, d: usize) -> AnnealedPath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = QuadraticBinaryTarget::new(Arr::matrix(d, d, w), h).unwrap();
        AnnealedPath::linear(Arc::new(q))
    }

    #[test]
    fn endpoints_match_prior_and_target() {
        let path = quad_path(1, 5);
        let x = DiscreteState::new(vec![1, 0, 1, 1, 0]);
        assert_eq!(path.log_p_tilde(0.0, &x).unwrap(), 0.0);
        let at_one = path.log_p_tilde(1.0, &x).unwrap();
        assert!((at_one - path.target.log_unnorm(&x)).abs() < 1e-15);
        let mid = path.log_p_tilde(0.5, &x).unwrap();
        assert!((mid - 0.5 * path.target.log_unnorm(&x)).abs() < 1e-15);
    }

    #[test]
    fn rejects_time_outside_unit_interval() {
        let path = quad_path(2, 3);
        let x = DiscreteState::zeros(3);
        assert!(path.log_p_tilde(-0.1, &x).is_err());
        assert!(path.log_p_tilde(1.1, &x).is_err());
    }

    #[test]
    fn flat_target_has_zero_time_derivative() {
        let path = AnnealedPath::linear(Arc::new(UniformTarget { d: 4, s: 2 }));
        let x = DiscreteState::zeros(4);
        for t in [0.0, 0.3, 0.9] {
            assert_eq!(path.dt_log_p_tilde(t, &x), 0.0);
        }
    }

    #[test]
    fn linear_schedule_derivative_is_log_rho() {
        let path = quad_path(3, 6);
        let x = DiscreteState::new(vec![1, 1, 0, 1, 0, 0]);
        let lr = path.target.log_unnorm(&x);
        for t in [0.1, 0.5, 0.9] {
            assert!((path.dt_log_p_tilde(t, &x) - lr).abs() < 1e-15);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for schedule in [Schedule::Linear, Schedule::Cosine] {
            let mut path = quad_path(4, 6);
            path.schedule = schedule;
            let x = DiscreteState::new(vec![0, 1, 1, 0, 1, 1]);
            let eps = 1e-6;
            for t in [0.2, 0.5, 0.8] {
                let fd = (path.log_p_tilde(t + eps, &x).unwrap()
                    - path.log_p_tilde(t - eps, &x).unwrap())
                    / (2.0 * eps);
                let an = path.dt_log_p_tilde(t, &x);
                assert!((fd - an).abs() < 1e-8, "{schedule:?} t={t}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn ratios_interpolate_linearly_before_clipping() {
        let path = quad_path(5, 6);
        let x = DiscreteState::new(vec![1, 0, 0, 1, 1, 0]);
        let full = path.neighbor_log_ratios_unclipped(1.0, &x);
        for t in [0.25, 0.5, 0.75] {
            let r = path.neighbor_log_ratios_unclipped(t, &x);
            for k in 0..r.numel() {
                assert!((r.data[k] - t * full.data[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ratios_at_time_zero_vanish() {
        let path = quad_path(6, 4);
        let x = DiscreteState::new(vec![1, 1, 0, 0]);
        let r = path.neighbor_log_ratios(0.0, &x);
        assert!(r.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_is_one_sided_upper() {
        let q = QuadraticBinaryTarget::new(Arr::zeros(vec![1, 1]), vec![12.0]).unwrap();
        let path = AnnealedPath::new(Arc::new(q), Schedule::Linear, 5.0).unwrap();
        let x = DiscreteState::new(vec![0]);
        let r = path.neighbor_log_ratios(1.0, &x);
        assert_eq!(r.at(0, 1), 5.0);
        // the negative direction is untouched
        let y = DiscreteState::new(vec![1]);
        let r = path.neighbor_log_ratios(1.0, &y);
        assert_eq!(r.at(0, 0), -12.0);
    }

    #[test]
    fn grid_is_evenly_spaced() {
        let g = TimeGrid::new(8).unwrap();
        assert_eq!(g.len(), 9);
        for k in 1..8 {
            let lhs = 2.0 * g.time(k);
            let rhs = g.time(k + 1) + g.time(k - 1);
            assert!((lhs - rhs).abs() < 1e-15);
        }
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(8), 1.0);
    }
}
