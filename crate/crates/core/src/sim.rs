//! Synthetic trajectory generator.
//!
//! States follow a linear-Gaussian autoregression with an additive action
//! effect, actions follow a logistic behavioral policy, and the reward is
//! `R(s_t, a_t, s_{t+1}) = -s_{t,2} a_t`.
//!
//! Each trajectory draws from its own ChaCha stream keyed by `(seed, traj_id)`,
//! so output does not depend on generation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{dot, expit};
use crate::TrajectoryDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Number of trajectories.
    pub n: usize,
    /// Decision steps; each trajectory stores `horizon + 1` triples.
    pub horizon: usize,
    /// State dimension, at least 2.
    pub k: usize,
    pub b_true: Vec<f64>,
    pub init_mean: f64,
    pub init_sd: f64,
    pub trans_autoreg: Vec<f64>,
    pub trans_action_effect: Vec<f64>,
    pub trans_noise_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            horizon: 3,
            k: 2,
            b_true: vec![0.0, 0.5],
            init_mean: 0.0,
            init_sd: 1.0,
            trans_autoreg: vec![0.5, 0.5],
            trans_action_effect: vec![0.0, -0.5],
            trans_noise_sd: 1.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return fail(format!("k must be at least 2 (got {})", self.k));
        }
        if self.n == 0 || self.horizon == 0 {
            return fail("n and horizon must be at least 1".into());
        }
        for (name, v) in [
            ("b_true", &self.b_true),
            ("trans_autoreg", &self.trans_autoreg),
            ("trans_action_effect", &self.trans_action_effect),
        ] {
            if v.len() != self.k {
                return fail(format!(
                    "{name} has length {}, expected k = {}",
                    v.len(),
                    self.k
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return fail(format!("{name} must be finite"));
            }
        }
        if !(self.trans_noise_sd > 0.0 && self.trans_noise_sd.is_finite()) {
            return fail("trans_noise_sd must be positive".into());
        }
        if !(self.init_sd >= 0.0 && self.init_sd.is_finite() && self.init_mean.is_finite()) {
            return fail("init_mean must be finite and init_sd non-negative".into());
        }
        Ok(())
    }
}

/// `R(s_t, a_t, s_{t+1}) = -s_{t,2} a_t`. Requires `s_t.len() >= 2`.
#[inline]
pub fn reward(s_t: &[f64], a_t: u8, _s_next: &[f64]) -> f64 {
    -s_t[1] * f64::from(a_t)
}

struct Trajectory {
    states: Vec<f64>,
    actions: Vec<u8>,
    rewards: Vec<f64>,
}

fn simulate_one(cfg: &SimConfig, traj: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(traj);
    let k = cfg.k;
    let steps = cfg.horizon + 1;
    let init = Normal::new(cfg.init_mean, cfg.init_sd).expect("validated");
    let noise = Normal::new(0.0, cfg.trans_noise_sd).expect("validated");

    let mut s: Vec<f64> = (0..k).map(|_| init.sample(&mut rng)).collect();
    let mut out = Trajectory {
        states: Vec::with_capacity(steps * k),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let p = expit(dot(&cfg.b_true, &s));
        let a = u8::from(rng.random::<f64>() < p);
        let next: Vec<f64> = (0..k)
            .map(|j| {
                cfg.trans_autoreg[j] * s[j]
                    + cfg.trans_action_effect[j] * f64::from(a)
                    + noise.sample(&mut rng)
            })
            .collect();
        out.states.extend_from_slice(&s);
        out.actions.push(a);
        out.rewards.push(reward(&s, a, &next));
        s = next;
    }
    out
}

pub fn simulate(cfg: &SimConfig) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let trajs: Vec<Trajectory> = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| simulate_one(cfg, i))
        .collect();
    let mut states = Vec::with_capacity(cfg.n * (cfg.horizon + 1) * cfg.k);
    let mut actions = Vec::with_capacity(cfg.n * (cfg.horizon + 1));
    let mut rewards = Vec::with_capacity(cfg.n * (cfg.horizon + 1));
    for t in trajs {
        states.extend(t.states);
        actions.extend(t.actions);
        rewards.extend(t.rewards);
    }
    TrajectoryDataset::new(cfg.n, cfg.horizon + 1, cfg.k, states, actions, rewards)
}
