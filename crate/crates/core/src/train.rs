//! Pieces shared by both learners: run configuration, per-episode logs and
//! greedy evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{AgentAction, EnvError, EpisodeConfig, HighwayEnv, Observation};
use crate::nn::{argmax, Mlp, NnError};
use crate::sim::HighwayConfig;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Step cap per episode; overrides the episode config's `max_steps`.
    pub steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    /// Soft target mix `v`.
    pub soft_mix: f64,
    pub lr: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub learn_every: u64,
    /// Transitions collected before the first update; `None` means `5 * batch_size`.
    pub warmup: Option<usize>,
    pub buffer_capacity: usize,
    pub hidden_sizes: Vec<usize>,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Learn steps between hard target copies (DQN).
    pub target_sync: u64,
    /// When false the trainers only roll out and never touch parameters.
    pub learning_enabled: bool,
    /// Fill `wallclock_ms`; off by default so logs stay byte-reproducible.
    pub record_wallclock: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            steps: 1000,
            batch_size: 2096,
            gamma: 0.99,
            soft_mix: 0.01,
            lr: 1e-3,
            temperature_start: 1.0,
            temperature_end: 0.5,
            learn_every: 10,
            warmup: None,
            buffer_capacity: 1_000_000,
            hidden_sizes: vec![64, 64],
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            target_sync: 500,
            learning_enabled: true,
            record_wallclock: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.to_string()));
        if self.episodes == 0 || self.steps == 0 {
            return bad("episodes and steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.soft_mix > 0.0 && self.soft_mix <= 1.0) {
            return bad("soft_mix must lie in (0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.learn_every == 0 || self.target_sync == 0 || self.buffer_capacity == 0 {
            return bad("learn_every, target_sync and buffer_capacity must be >= 1");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden layer sizes must be >= 1");
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !(eps_ok(self.epsilon_start) && eps_ok(self.epsilon_end)) {
            return bad("epsilon values must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn warmup_transitions(&self) -> usize {
        self.warmup.unwrap_or(5 * self.batch_size)
    }

    /// Gumbel temperature for `episode`, linear from start to end.
    pub fn temperature(&self, episode: usize) -> f64 {
        let frac = progress(episode, self.episodes);
        self.temperature_start + (self.temperature_end - self.temperature_start) * frac
    }

    /// Exploration rate for `episode`: linear decay over the first half, then flat.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let half = self.episodes.div_ceil(2);
        let frac = progress(episode.min(half), half + 1);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

fn progress(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (i.min(n - 1)) as f64 / (n - 1) as f64
    }
}

/// One row of `episodes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub algo: String,
    pub n_agents: usize,
    /// Episode return averaged over agents.
    pub mean_reward: f64,
    /// Mean `V_h` over the steps that still had vehicles on the road.
    pub harmonic_speed_mean: f64,
    pub lane_changes_total: u64,
    pub c1_violations: u64,
    pub c3_violations: u64,
    pub roadblock_stalls: u64,
    pub exits: u64,
    pub wallclock_ms: u64,
}

pub const EPISODE_LOG_COLUMNS: [&str; 11] = [
    "episode",
    "algo",
    "n_agents",
    "mean_reward",
    "harmonic_speed_mean",
    "lane_changes_total",
    "c1_violations",
    "c3_violations",
    "roadblock_stalls",
    "exits",
    "wallclock_ms",
];

impl EpisodeLog {
    /// Summarises the episode currently held by `env`.
    pub fn from_env(env: &HighwayEnv, episode: usize, algo: &str, wallclock_ms: u64) -> Self {
        let n = env.config().n_agents;
        let steps = env.steps();
        let total: f64 = steps.iter().flat_map(|s| s.rewards.iter()).sum();
        let speeds: Vec<f64> = steps.iter().map(|s| s.v_h).filter(|&v| v > 0.0).collect();
        let report = env.constraint_report();
        Self {
            episode,
            algo: algo.to_string(),
            n_agents: n,
            mean_reward: total / n as f64,
            harmonic_speed_mean: mean(&speeds),
            lane_changes_total: report.lane_change_total,
            c1_violations: report.c1_violations,
            c3_violations: report.c3_violations,
            roadblock_stalls: report.roadblock_stalls,
            exits: report.exits,
            wallclock_ms,
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant or shorter than two.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    if xs.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    cov / (vx * vy).sqrt()
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Greedy action of `net` (actor logits or Q-values), ties to the lowest index.
pub fn greedy_action(net: &Mlp, obs: &Observation) -> Result<usize, NnError> {
    let out = net.predict_one(obs.as_slice())?;
    Ok(argmax(ndarray::ArrayView1::from(&out)))
}

/// Greedy rollouts with one policy network per agent. When the evaluation
/// uses more agents than there are networks, vehicle `k` is driven by
/// `policies[k % policies.len()]`.
pub fn evaluate_greedy(
    policies: &[&Mlp],
    algo: &str,
    env_cfg: &EpisodeConfig,
    highway: &HighwayConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>, LearnError> {
    if policies.is_empty() {
        return Err(LearnError::InvalidConfig("no policy networks".into()));
    }
    let mut env = HighwayEnv::new(env_cfg.clone(), highway.clone(), seed)?;
    let mut logs = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut obs = env.reset(episode)?;
        while !env.is_done() {
            let actions = obs
                .iter()
                .enumerate()
                .map(|(k, o)| {
                    let a = greedy_action(policies[k % policies.len()], o)?;
                    Ok(AgentAction::from_index(a).expect("network has three outputs"))
                })
                .collect::<Result<Vec<_>, NnError>>()?;
            env.step(&actions)?;
            obs = env.observations()?;
        }
        logs.push(EpisodeLog::from_env(&env, episode, algo, 0));
    }
    Ok(logs)
}
