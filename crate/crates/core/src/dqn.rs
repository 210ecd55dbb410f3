//! Independent DQN: every agent learns its own Q-network from its own
//! replay buffer and treats the other vehicles as part of the environment.

use std::time::Instant;

use ndarray::{aview1, s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{mix_seed, AgentAction, EpisodeConfig, HighwayEnv, Observation, ACTION_COUNT, OBS_LEN};
use crate::nn::checkpoint::FORMAT_VERSION;
use crate::nn::{
    adam_update, argmax, AdamState, CheckpointBundle, CheckpointMetadata, Mlp, MlpSpec, NetworkDoc, NnError,
    OutputActivation,
};
use crate::replay::ReplayBuffer;
use crate::sim::HighwayConfig;
use crate::train::{evaluate_greedy, EpisodeLog, LearnError, TrainConfig};

pub const ALGO: &str = "dqn";

const INIT_STREAM: u64 = 21;
const EXPLORE_STREAM: u64 = 22;
const SAMPLE_STREAM: u64 = 23;

pub fn q_spec(hidden: &[usize]) -> Result<MlpSpec, NnError> {
    let mut sizes = vec![OBS_LEN];
    sizes.extend_from_slice(hidden);
    sizes.push(ACTION_COUNT);
    MlpSpec::new(sizes, OutputActivation::Linear)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnAgent {
    pub q_net: Mlp,
    pub q_target: Mlp,
    pub adam: AdamState,
    pub learn_steps: u64,
    pub sync_period: u64,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], lr: f64, sync_period: u64, rng: &mut R) -> Result<Self, NnError> {
        let q_net = Mlp::random(q_spec(hidden)?, rng)?;
        Ok(Self::from_parts(q_net.clone(), q_net, lr, sync_period))
    }

    pub fn from_parts(q_net: Mlp, q_target: Mlp, lr: f64, sync_period: u64) -> Self {
        let adam = AdamState::new(&q_net.params, lr);
        Self {
            q_net,
            q_target,
            adam,
            learn_steps: 0,
            sync_period,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DqnMode {
    /// Uniform random action with probability `epsilon`, greedy otherwise.
    EpsilonGreedy(f64),
    Greedy,
}

pub fn dqn_select<R: Rng + ?Sized>(agent: &DqnAgent, obs: &Observation, mode: DqnMode, rng: &mut R) -> Result<usize, NnError> {
    let q = agent.q_net.predict_one(obs.as_slice())?;
    if q.len() != ACTION_COUNT {
        return Err(NnError::ShapeMismatch(format!("Q-network has {} outputs", q.len())));
    }
    if let DqnMode::EpsilonGreedy(eps) = mode {
        if rng.random::<f64>() < eps {
            return Ok(rng.random_range(0..ACTION_COUNT));
        }
    }
    Ok(argmax(aview1(&q)))
}

/// One agent's view of a transition.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTransition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqnBatch {
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done: Array1<f64>,
}

impl DqnBatch {
    pub fn from_transitions(items: &[&AgentTransition]) -> Result<Self, LearnError> {
        if items.is_empty() {
            return Err(LearnError::InvalidConfig("empty minibatch".into()));
        }
        if items.iter().any(|t| t.action >= ACTION_COUNT) {
            return Err(NnError::ShapeMismatch("action index out of range".into()).into());
        }
        let z = items.len();
        let mut obs = Array2::zeros((z, OBS_LEN));
        let mut next_obs = Array2::zeros((z, OBS_LEN));
        for (r, t) in items.iter().enumerate() {
            obs.row_mut(r).assign(&aview1(&t.obs.0));
            next_obs.row_mut(r).assign(&aview1(&t.next_obs.0));
        }
        Ok(Self {
            obs,
            actions: items.iter().map(|t| t.action).collect(),
            rewards: items.iter().map(|t| t.reward).collect(),
            next_obs,
            done: items.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `r + gamma * max_a Q_target(s', a)`, bootstrap dropped on terminal rows.
pub fn dqn_targets(agent: &DqnAgent, batch: &DqnBatch, gamma: f64) -> Result<Array1<f64>, LearnError> {
    let next_q = agent.q_target.predict(batch.next_obs.view())?;
    Ok((0..batch.len())
        .map(|r| {
            let best = next_q.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            crate::maddpg::bootstrap_target(batch.rewards[r], gamma, best, batch.done[r] > 0.5)
        })
        .collect())
}

/// One Adam step on the TD loss; copies the online net into the target every
/// `sync_period` learn steps. Returns the loss before the step.
pub fn dqn_train_step(agent: &mut DqnAgent, batch: &DqnBatch, gamma: f64) -> Result<f64, LearnError> {
    if batch.is_empty() {
        return Err(LearnError::InvalidConfig("empty minibatch".into()));
    }
    let targets = dqn_targets(agent, batch, gamma)?;
    let z = batch.len() as f64;
    let (q, cache) = agent.q_net.forward(batch.obs.view())?;
    let mut grad = Array2::zeros(q.dim());
    let mut loss = 0.0;
    for (r, &a) in batch.actions.iter().enumerate() {
        let diff = q[[r, a]] - targets[r];
        loss += diff * diff;
        grad[[r, a]] = 2.0 * diff / z;
    }
    let (grads, _) = agent.q_net.backward(&cache, grad.view())?;
    adam_update(&mut agent.q_net.params, &grads, &mut agent.adam)?;
    agent.learn_steps += 1;
    if agent.learn_steps.is_multiple_of(agent.sync_period) {
        agent.q_target = agent.q_net.clone();
    }
    Ok(loss / z)
}

#[derive(Debug, Clone)]
pub struct DqnOutcome {
    pub agents: Vec<DqnAgent>,
    pub logs: Vec<EpisodeLog>,
    pub learn_steps: u64,
}

pub fn init_agents(n_agents: usize, cfg: &TrainConfig) -> Result<Vec<DqnAgent>, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_STREAM, 0));
    (0..n_agents)
        .map(|_| Ok(DqnAgent::new(&cfg.hidden_sizes, cfg.lr, cfg.target_sync, &mut rng)?))
        .collect()
}

/// Same episode loop and learning schedule as [`crate::maddpg::train`], with
/// one buffer per agent. An agent's transitions stop once its vehicle has
/// left the road; the departing step is stored as terminal.
pub fn dqn_train(env_cfg: &EpisodeConfig, highway: &HighwayConfig, cfg: &TrainConfig) -> Result<DqnOutcome, LearnError> {
    cfg.validate()?;
    let env_cfg = EpisodeConfig {
        max_steps: cfg.steps,
        ..env_cfg.clone()
    };
    let n = env_cfg.n_agents;
    let mut env = HighwayEnv::new(env_cfg, highway.clone(), cfg.seed)?;
    let mut agents = init_agents(n, cfg)?;
    let mut explore_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, EXPLORE_STREAM, 0));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SAMPLE_STREAM, 0));
    let mut buffers: Vec<ReplayBuffer<AgentTransition>> = (0..n).map(|_| ReplayBuffer::new(cfg.buffer_capacity)).collect();
    let warmup = cfg.warmup_transitions();
    let mut total_steps = 0u64;
    let mut learn_steps = 0u64;
    let mut logs = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let started = Instant::now();
        let mode = DqnMode::EpsilonGreedy(cfg.epsilon(episode));
        let mut obs = env.reset(episode)?;
        while !env.is_done() {
            let actions = agents
                .iter()
                .zip(&obs)
                .map(|(a, o)| dqn_select(a, o, mode, &mut explore_rng))
                .collect::<Result<Vec<_>, _>>()?;
            let joint: Vec<AgentAction> = actions.iter().map(|&a| AgentAction::ALL[a]).collect();
            let out = env.step(&joint)?;
            let next_obs = env.observations()?;
            for i in 0..n {
                if let Some(reward) = out.rewards[i] {
                    let departed = !out.world.vehicles[i].is_active();
                    buffers[i].push(AgentTransition {
                        obs: obs[i],
                        action: actions[i],
                        reward: reward.total,
                        next_obs: next_obs[i],
                        done: out.done || departed,
                    });
                }
            }
            obs = next_obs;
            total_steps += 1;

            if cfg.learning_enabled && total_steps.is_multiple_of(cfg.learn_every) {
                let mut learned = false;
                for (agent, buffer) in agents.iter_mut().zip(&buffers) {
                    if buffer.len() >= warmup {
                        let batch = DqnBatch::from_transitions(&buffer.sample(cfg.batch_size, &mut sample_rng))?;
                        dqn_train_step(agent, &batch, cfg.gamma)?;
                        learned = true;
                    }
                }
                learn_steps += learned as u64;
            }
        }
        let wallclock = if cfg.record_wallclock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        logs.push(EpisodeLog::from_env(&env, episode, ALGO, wallclock));
    }
    Ok(DqnOutcome {
        agents,
        logs,
        learn_steps,
    })
}

pub fn evaluate(
    q_nets: &[Mlp],
    env_cfg: &EpisodeConfig,
    highway: &HighwayConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>, LearnError> {
    for q in q_nets {
        check_q_spec(&q.spec)?;
    }
    let refs: Vec<&Mlp> = q_nets.iter().collect();
    evaluate_greedy(&refs, ALGO, env_cfg, highway, episodes, seed)
}

fn check_q_spec(spec: &MlpSpec) -> Result<(), NnError> {
    if spec.input_size() != OBS_LEN || spec.output_size() != ACTION_COUNT {
        return Err(NnError::ShapeMismatch(format!(
            "Q-network layer sizes {:?} do not map {OBS_LEN} observations to {ACTION_COUNT} actions",
            spec.layer_sizes
        )));
    }
    Ok(())
}

pub fn to_bundle(agents: &[DqnAgent], metadata: CheckpointMetadata) -> CheckpointBundle {
    let mut networks = Vec::with_capacity(agents.len() * 2);
    for (i, agent) in agents.iter().enumerate() {
        for (role, mlp) in [("q_net", &agent.q_net), ("q_target", &agent.q_target)] {
            let meta = CheckpointMetadata {
                role: Some(role.to_string()),
                agent: Some(i),
                ..metadata.clone()
            };
            networks.push(NetworkDoc::from_mlp(mlp, meta));
        }
    }
    CheckpointBundle {
        format_version: FORMAT_VERSION,
        algo: ALGO.to_string(),
        metadata,
        networks,
    }
}

pub fn from_bundle(bundle: &CheckpointBundle, cfg: &TrainConfig) -> Result<Vec<DqnAgent>, LearnError> {
    let n = bundle.metadata.n_agents;
    if bundle.count_role("q_net") != n {
        return Err(NnError::ShapeMismatch(format!("bundle does not hold {n} Q-networks")).into());
    }
    (0..n)
        .map(|i| {
            let get = |role: &str| -> Result<Mlp, NnError> {
                bundle
                    .network(role, i)
                    .ok_or_else(|| NnError::ShapeMismatch(format!("missing {role} for agent {i}")))?
                    .to_mlp()
            };
            let (q_net, q_target) = (get("q_net")?, get("q_target")?);
            check_q_spec(&q_net.spec)?;
            if q_target.spec != q_net.spec {
                return Err(NnError::ShapeMismatch("target network differs from online network".into()).into());
            }
            Ok(DqnAgent::from_parts(q_net, q_target, cfg.lr, cfg.target_sync))
        })
        .collect()
}

/// Greedy Q-values for a batch of observations; used by tests and tooling.
pub fn q_values(agent: &DqnAgent, obs: &[Observation]) -> Result<Array2<f64>, NnError> {
    let mut input = Array2::zeros((obs.len(), OBS_LEN));
    for (r, o) in obs.iter().enumerate() {
        input.slice_mut(s![r, ..]).assign(&aview1(&o.0));
    }
    agent.q_net.predict(input.view())
}
