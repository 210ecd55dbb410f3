//! Multi-agent DDPG with Gumbel-softmax actors and centralised critics.
//!
//! Agent `i` owns an actor `obs_i -> logits` and a critic
//! `(obs_1..obs_n, onehot_1..onehot_n) -> Q_i`, each with a target copy.
//! All agents share one replay buffer of joint transitions.

use std::time::Instant;

use ndarray::{aview1, concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{mix_seed, AgentAction, EpisodeConfig, HighwayEnv, Observation, TransitionRecord, ACTION_COUNT, OBS_LEN};
use crate::nn::{
    adam_update, argmax, gumbel_softmax, sample_gumbel, soft_update, softmax_rows, AdamState, CheckpointBundle,
    CheckpointMetadata, Mlp, MlpSpec, NetworkDoc, NnError, OutputActivation, ParamSet,
};
use crate::nn::checkpoint::FORMAT_VERSION;
use crate::replay::ReplayBuffer;
use crate::sim::HighwayConfig;
pub use crate::train::{EpisodeLog, LearnError, TrainConfig};

pub const ALGO: &str = "maddpg";

const INIT_STREAM: u64 = 11;
const EXPLORE_STREAM: u64 = 12;
const SAMPLE_STREAM: u64 = 13;
const NOISE_STREAM: u64 = 14;

pub fn actor_spec(hidden: &[usize]) -> Result<MlpSpec, NnError> {
    let mut sizes = vec![OBS_LEN];
    sizes.extend_from_slice(hidden);
    sizes.push(ACTION_COUNT);
    MlpSpec::new(sizes, OutputActivation::Linear)
}

pub fn critic_spec(n_agents: usize, hidden: &[usize]) -> Result<MlpSpec, NnError> {
    let mut sizes = vec![n_agents * (OBS_LEN + ACTION_COUNT)];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    MlpSpec::new(sizes, OutputActivation::Linear)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic: Mlp,
    pub critic_target: Mlp,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(n_agents: usize, hidden: &[usize], lr: f64, rng: &mut R) -> Result<Self, NnError> {
        let actor = Mlp::random(actor_spec(hidden)?, rng)?;
        let critic = Mlp::random(critic_spec(n_agents, hidden)?, rng)?;
        Ok(Self::from_parts(actor.clone(), actor, critic.clone(), critic, lr))
    }

    pub fn from_parts(actor: Mlp, actor_target: Mlp, critic: Mlp, critic_target: Mlp, lr: f64) -> Self {
        let actor_adam = AdamState::new(&actor.params, lr);
        let critic_adam = AdamState::new(&critic.params, lr);
        Self {
            actor,
            actor_target,
            critic,
            critic_target,
            actor_adam,
            critic_adam,
        }
    }

    /// Every network of every agent, in a fixed order.
    fn all_params(nets: &[AgentNets]) -> Vec<&ParamSet> {
        nets.iter()
            .flat_map(|n| [&n.actor.params, &n.actor_target.params, &n.critic.params, &n.critic_target.params])
            .collect()
    }
}

pub fn init_agents(n_agents: usize, cfg: &TrainConfig) -> Result<Vec<AgentNets>, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_STREAM, 0));
    (0..n_agents)
        .map(|_| Ok(AgentNets::new(n_agents, &cfg.hidden_sizes, cfg.lr, &mut rng)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Gumbel-softmax sample over the actor logits.
    Explore,
    /// Argmax of the actor logits.
    Greedy,
}

/// One action per observation. Vehicle `k` uses `actors[k % actors.len()]`.
pub fn select_actions<R: Rng + ?Sized>(
    actors: &[&Mlp],
    obs: &[Observation],
    temperature: f64,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Vec<usize>, LearnError> {
    if actors.is_empty() {
        return Err(NnError::ShapeMismatch("no actors".into()).into());
    }
    obs.iter()
        .enumerate()
        .map(|(k, o)| {
            let logits = Array1::from(actors[k % actors.len()].predict_one(o.as_slice())?);
            if logits.len() != ACTION_COUNT {
                return Err(NnError::ShapeMismatch(format!("actor has {} outputs", logits.len())).into());
            }
            Ok(match mode {
                ActionMode::Greedy => argmax(logits.view()),
                ActionMode::Explore => gumbel_softmax(logits.view(), temperature, rng).hard,
            })
        })
        .collect()
}

/// Minibatch of joint transitions laid out column-wise: agent `i` owns
/// observation columns `12i..12i+12` and action columns `3i..3i+3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub n_agents: usize,
    pub obs: Array2<f64>,
    /// One-hot actions.
    pub actions: Array2<f64>,
    pub rewards: Array2<f64>,
    pub next_obs: Array2<f64>,
    /// 1.0 on terminal rows.
    pub done: Array1<f64>,
}

impl Minibatch {
    pub fn from_records(records: &[&TransitionRecord]) -> Result<Self, LearnError> {
        let first = records
            .first()
            .ok_or_else(|| LearnError::InvalidConfig("empty minibatch".into()))?;
        let n = first.n_agents();
        if records.iter().any(|r| r.n_agents() != n || !r.is_consistent()) {
            return Err(NnError::ShapeMismatch("inconsistent transition records".into()).into());
        }
        let z = records.len();
        let mut batch = Self {
            n_agents: n,
            obs: Array2::zeros((z, n * OBS_LEN)),
            actions: Array2::zeros((z, n * ACTION_COUNT)),
            rewards: Array2::zeros((z, n)),
            next_obs: Array2::zeros((z, n * OBS_LEN)),
            done: Array1::zeros(z),
        };
        for (row, rec) in records.iter().enumerate() {
            for i in 0..n {
                let cols = i * OBS_LEN..(i + 1) * OBS_LEN;
                batch.obs.slice_mut(s![row, cols.clone()]).assign(&aview1(&rec.obs[i].0));
                batch.next_obs.slice_mut(s![row, cols]).assign(&aview1(&rec.next_obs[i].0));
                batch.actions[[row, i * ACTION_COUNT + rec.actions[i]]] = 1.0;
                batch.rewards[[row, i]] = rec.rewards[i];
            }
            batch.done[row] = if rec.done { 1.0 } else { 0.0 };
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn agent_obs(&self, i: usize) -> ArrayView2<'_, f64> {
        self.obs.slice(s![.., i * OBS_LEN..(i + 1) * OBS_LEN])
    }

    pub fn agent_next_obs(&self, i: usize) -> ArrayView2<'_, f64> {
        self.next_obs.slice(s![.., i * OBS_LEN..(i + 1) * OBS_LEN])
    }
}

fn critic_input(obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), obs, actions]
}

fn one_hot_argmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (r, row) in logits.rows().into_iter().enumerate() {
        out[[r, argmax(row)]] = 1.0;
    }
    out
}

/// `y = r + gamma * Q'` with the bootstrap dropped on terminal rows.
pub fn bootstrap_target(reward: f64, gamma: f64, next_q: f64, done: bool) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_q
    }
}

/// Critic regression targets for `agent`. Next actions come from the target
/// actors, taken greedily.
pub fn critic_targets(nets: &[AgentNets], agent: usize, batch: &Minibatch, gamma: f64) -> Result<Array1<f64>, LearnError> {
    check_agents(nets, agent, batch)?;
    let next_actions: Vec<Array2<f64>> = nets
        .iter()
        .enumerate()
        .map(|(j, n)| Ok(one_hot_argmax_rows(&n.actor_target.predict(batch.agent_next_obs(j))?)))
        .collect::<Result<_, NnError>>()?;
    let views: Vec<ArrayView2<f64>> = next_actions.iter().map(|a| a.view()).collect();
    let next_actions = concatenate(Axis(1), &views).map_err(|e| NnError::ShapeMismatch(e.to_string()))?;
    let next_q = nets[agent]
        .critic_target
        .predict(critic_input(batch.next_obs.view(), next_actions.view()).view())?;
    Ok((0..batch.len())
        .map(|r| {
            bootstrap_target(batch.rewards[[r, agent]], gamma, next_q[[r, 0]], batch.done[r] > 0.5)
        })
        .collect())
}

fn check_agents(nets: &[AgentNets], agent: usize, batch: &Minibatch) -> Result<(), LearnError> {
    if nets.len() != batch.n_agents || agent >= nets.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} agent networks, batch of {} agents, agent index {agent}",
            nets.len(),
            batch.n_agents
        ))
        .into());
    }
    if batch.is_empty() {
        return Err(LearnError::InvalidConfig("empty minibatch".into()));
    }
    Ok(())
}

/// Mean squared error of the online critic against `targets`.
pub fn critic_loss(critic: &Mlp, batch: &Minibatch, targets: &Array1<f64>) -> Result<f64, LearnError> {
    let q = critic.predict(critic_input(batch.obs.view(), batch.actions.view()).view())?;
    Ok(q.column(0).iter().zip(targets).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / batch.len() as f64)
}

/// One Adam step on agent `agent`'s critic. Returns the loss before the step.
pub fn critic_update(nets: &mut [AgentNets], agent: usize, batch: &Minibatch, gamma: f64) -> Result<f64, LearnError> {
    let targets = critic_targets(nets, agent, batch, gamma)?;
    let z = batch.len() as f64;
    let net = &mut nets[agent];
    let (q, cache) = net.critic.forward(critic_input(batch.obs.view(), batch.actions.view()).view())?;
    let diff = &q.column(0) - &targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / z;
    let grad_q = (diff * (2.0 / z)).insert_axis(Axis(1));
    let (grads, _) = net.critic.backward(&cache, grad_q.view())?;
    adam_update(&mut net.critic.params, &grads, &mut net.critic_adam)?;
    Ok(loss)
}

/// How agent `i`'s own action enters the critic during the actor update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    /// Hard one-hot forward, gradient of the soft sample backward.
    StraightThrough,
    /// The soft sample itself.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGradient {
    /// `mean_r Q_i(obs, a)` with agent `i`'s action replaced.
    pub objective: f64,
    /// Gradient of `objective` with respect to the actor parameters.
    pub grads: ParamSet,
}

/// Policy gradient for agent `agent` with explicit Gumbel `noise` (one row per
/// batch row, one column per action).
pub fn actor_gradient(
    nets: &[AgentNets],
    agent: usize,
    batch: &Minibatch,
    temperature: f64,
    noise: ArrayView2<f64>,
    relaxation: Relaxation,
) -> Result<ActorGradient, LearnError> {
    check_agents(nets, agent, batch)?;
    if noise.dim() != (batch.len(), ACTION_COUNT) {
        return Err(NnError::ShapeMismatch(format!("noise shape {:?}", noise.dim())).into());
    }
    let net = &nets[agent];
    let (logits, actor_cache) = net.actor.forward(batch.agent_obs(agent))?;
    let soft = softmax_rows(((&logits + &noise) / temperature).view());
    let own_action = match relaxation {
        Relaxation::Soft => soft.clone(),
        Relaxation::StraightThrough => one_hot_argmax_rows(&soft),
    };
    let cols = agent * ACTION_COUNT..(agent + 1) * ACTION_COUNT;
    let mut actions = batch.actions.clone();
    actions.slice_mut(s![.., cols.clone()]).assign(&own_action);

    let z = batch.len() as f64;
    let (q, critic_cache) = net.critic.forward(critic_input(batch.obs.view(), actions.view()).view())?;
    let objective = q.sum() / z;
    let grad_out = Array2::from_elem((batch.len(), 1), 1.0 / z);
    let grad_input = net.critic.input_gradient(&critic_cache, grad_out.view())?;
    let offset = batch.n_agents * OBS_LEN;
    let grad_action = grad_input.slice(s![.., offset + cols.start..offset + cols.end]);

    // Softmax Jacobian row by row, scaled by 1 / temperature.
    let dot = (&soft * &grad_action).sum_axis(Axis(1)).insert_axis(Axis(1));
    let grad_logits = &soft * &(&grad_action - &dot) / temperature;
    let (grads, _) = net.actor.backward(&actor_cache, grad_logits.view())?;
    Ok(ActorGradient { objective, grads })
}

/// One Adam ascent step on agent `agent`'s actor. Returns the objective
/// before the step.
pub fn actor_update<R: Rng + ?Sized>(
    nets: &mut [AgentNets],
    agent: usize,
    batch: &Minibatch,
    temperature: f64,
    relaxation: Relaxation,
    rng: &mut R,
) -> Result<f64, LearnError> {
    let noise = Array2::from_shape_vec((batch.len(), ACTION_COUNT), sample_gumbel(rng, batch.len() * ACTION_COUNT))
        .expect("noise length matches shape");
    let ActorGradient { objective, mut grads } = actor_gradient(nets, agent, batch, temperature, noise.view(), relaxation)?;
    grads.iter_mut().for_each(|g| *g = -*g);
    let net = &mut nets[agent];
    adam_update(&mut net.actor.params, &grads, &mut net.actor_adam)?;
    Ok(objective)
}

pub fn soft_update_targets(nets: &mut [AgentNets], mix: f64) -> Result<(), LearnError> {
    for net in nets {
        soft_update(&net.actor.params, &mut net.actor_target.params, mix)?;
        soft_update(&net.critic.params, &mut net.critic_target.params, mix)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub nets: Vec<AgentNets>,
    pub logs: Vec<EpisodeLog>,
    pub buffer_len: usize,
    pub learn_steps: u64,
}

/// Runs the full training loop. `env_cfg.max_steps` is replaced by `cfg.steps`.
pub fn train(env_cfg: &EpisodeConfig, highway: &HighwayConfig, cfg: &TrainConfig) -> Result<TrainOutcome, LearnError> {
    cfg.validate()?;
    let env_cfg = EpisodeConfig {
        max_steps: cfg.steps,
        ..env_cfg.clone()
    };
    let n = env_cfg.n_agents;
    let mut env = HighwayEnv::new(env_cfg, highway.clone(), cfg.seed)?;
    let mut nets = init_agents(n, cfg)?;
    let mut explore_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, EXPLORE_STREAM, 0));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SAMPLE_STREAM, 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, NOISE_STREAM, 0));
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let warmup = cfg.warmup_transitions();
    let mut total_steps = 0u64;
    let mut learn_steps = 0u64;
    let mut logs = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let started = Instant::now();
        let temperature = cfg.temperature(episode);
        let mut obs = env.reset(episode)?;
        while !env.is_done() {
            let actors: Vec<&Mlp> = nets.iter().map(|a| &a.actor).collect();
            let actions = select_actions(&actors, &obs, temperature, ActionMode::Explore, &mut explore_rng)?;
            let joint: Vec<AgentAction> = actions.iter().map(|&a| AgentAction::ALL[a]).collect();
            let out = env.step(&joint)?;
            let next_obs = env.observations()?;
            buffer.push(TransitionRecord {
                obs,
                actions,
                rewards: out.scalar_rewards(),
                next_obs: next_obs.clone(),
                done: out.done,
            });
            obs = next_obs;
            total_steps += 1;

            if cfg.learning_enabled && buffer.len() >= warmup && total_steps.is_multiple_of(cfg.learn_every) {
                for agent in 0..n {
                    let batch = Minibatch::from_records(&buffer.sample(cfg.batch_size, &mut sample_rng))?;
                    critic_update(&mut nets, agent, &batch, cfg.gamma)?;
                    actor_update(&mut nets, agent, &batch, temperature, Relaxation::StraightThrough, &mut noise_rng)?;
                }
                soft_update_targets(&mut nets, cfg.soft_mix)?;
                learn_steps += 1;
            }
        }
        let wallclock = if cfg.record_wallclock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        logs.push(EpisodeLog::from_env(&env, episode, ALGO, wallclock));
    }
    Ok(TrainOutcome {
        nets,
        logs,
        buffer_len: buffer.len(),
        learn_steps,
    })
}

/// Greedy evaluation of the trained actors, reused round-robin when
/// `env_cfg.n_agents` differs from the number of trained agents.
pub fn evaluate(
    actors: &[Mlp],
    env_cfg: &EpisodeConfig,
    highway: &HighwayConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeLog>, LearnError> {
    for actor in actors {
        check_actor_spec(&actor.spec)?;
    }
    let refs: Vec<&Mlp> = actors.iter().collect();
    crate::train::evaluate_greedy(&refs, ALGO, env_cfg, highway, episodes, seed)
}

fn check_actor_spec(spec: &MlpSpec) -> Result<(), NnError> {
    if spec.input_size() != OBS_LEN || spec.output_size() != ACTION_COUNT {
        return Err(NnError::ShapeMismatch(format!(
            "actor layer sizes {:?} do not map {OBS_LEN} observations to {ACTION_COUNT} actions",
            spec.layer_sizes
        )));
    }
    Ok(())
}

const ROLES: [&str; 4] = ["actor", "actor_target", "critic", "critic_target"];

pub fn to_bundle(nets: &[AgentNets], metadata: CheckpointMetadata) -> CheckpointBundle {
    let mut networks = Vec::with_capacity(nets.len() * ROLES.len());
    for (i, net) in nets.iter().enumerate() {
        for (role, mlp) in ROLES.iter().zip([&net.actor, &net.actor_target, &net.critic, &net.critic_target]) {
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

/// Restores all networks, checking every shape against the recorded agent count.
pub fn from_bundle(bundle: &CheckpointBundle, lr: f64) -> Result<Vec<AgentNets>, LearnError> {
    let n = bundle.metadata.n_agents;
    if bundle.count_role("actor") != n || bundle.count_role("critic") != n {
        return Err(NnError::ShapeMismatch(format!("bundle does not hold {n} actors and critics")).into());
    }
    (0..n)
        .map(|i| {
            let get = |role: &str| -> Result<Mlp, NnError> {
                bundle
                    .network(role, i)
                    .ok_or_else(|| NnError::ShapeMismatch(format!("missing {role} for agent {i}")))?
                    .to_mlp()
            };
            let (actor, actor_target, critic, critic_target) =
                (get("actor")?, get("actor_target")?, get("critic")?, get("critic_target")?);
            check_actor_spec(&actor.spec)?;
            if critic.spec.input_size() != n * (OBS_LEN + ACTION_COUNT) || critic.spec.output_size() != 1 {
                return Err(NnError::ShapeMismatch(format!(
                    "critic layer sizes {:?} do not fit {n} agents",
                    critic.spec.layer_sizes
                ))
                .into());
            }
            if actor_target.spec != actor.spec || critic_target.spec != critic.spec {
                return Err(NnError::ShapeMismatch("target networks differ from online networks".into()).into());
            }
            Ok(AgentNets::from_parts(actor, actor_target, critic, critic_target, lr))
        })
        .collect()
}

/// Parameters of every network, for bit-level comparisons.
pub fn parameter_snapshot(nets: &[AgentNets]) -> Vec<ParamSet> {
    AgentNets::all_params(nets).into_iter().cloned().collect()
}
