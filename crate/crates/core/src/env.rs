//! Multi-agent MDP over the highway simulator.
//!
//! Each agent drives one vehicle (agent `i` owns vehicle id `i`). Per step the
//! agents pick an [`AgentAction`], lane changes and exits are applied in
//! ascending id order, the longitudinal model advances once and every agent
//! that was still on the road receives `case constant + V_h`, where `V_h` is
//! the harmonic mean speed of the vehicles left on the road.

use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    spawn_vehicles, ExitRampSpec, ExitResult, HighwayConfig, LaneChangeResult, LaneDirection, Neighbor,
    RoadblockSpec, SimError, VehicleState, VehicleStatus, WorldState,
};

pub const OBS_LEN: usize = 12;
pub const ACTION_COUNT: usize = 3;
/// Speeds are floored here before entering the harmonic mean.
pub const SPEED_FLOOR: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("expected {expected} actions, got {got}")]
    ActionCountMismatch { expected: usize, got: usize },
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
}

/// `V_h = M / sum(1 / v_i)` over floored speeds; zero for an empty set.
pub fn harmonic_mean_speed(speeds: &[f64]) -> f64 {
    if speeds.is_empty() {
        return 0.0;
    }
    let inv: f64 = speeds.iter().map(|v| 1.0 / v.max(SPEED_FLOOR)).sum();
    speeds.len() as f64 / inv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    ThreeLaneTwoBlocks,
    TwoLaneOneBlock,
}

impl Scenario {
    pub fn lane_count(self) -> usize {
        match self {
            Scenario::ThreeLaneTwoBlocks => 3,
            Scenario::TwoLaneOneBlock => 2,
        }
    }

    pub fn roadblock_count(self) -> usize {
        match self {
            Scenario::ThreeLaneTwoBlocks => 2,
            Scenario::TwoLaneOneBlock => 1,
        }
    }

    /// Scenario geometry on top of `base`: lane count plus an exit ramp on
    /// the rightmost lane when `base` has none.
    pub fn highway(self, base: &HighwayConfig) -> HighwayConfig {
        HighwayConfig {
            lane_count: self.lane_count(),
            exit_ramp: Some(base.exit_ramp.clone().unwrap_or_default()),
            ..base.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ThreeLaneTwoBlocks => "ThreeLaneTwoBlocks",
            Scenario::TwoLaneOneBlock => "TwoLaneOneBlock",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ThreeLaneTwoBlocks" | "three-lane" => Ok(Scenario::ThreeLaneTwoBlocks),
            "TwoLaneOneBlock" | "two-lane" => Ok(Scenario::TwoLaneOneBlock),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentAction {
    Keep,
    ChangeLeft,
    /// Takes the exit instead when the vehicle is on the ramp span.
    ChangeRight,
}

impl AgentAction {
    pub const ALL: [AgentAction; ACTION_COUNT] = [AgentAction::Keep, AgentAction::ChangeLeft, AgentAction::ChangeRight];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConstants {
    pub clean: f64,
    pub rough_merge: f64,
    pub exit: f64,
    pub violation: f64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self {
            clean: 2.0,
            rough_merge: 1.0,
            exit: 0.0,
            violation: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub n_agents: usize,
    pub max_steps: u64,
    /// Minimum speed (C1), enforced after `grace_steps`.
    pub v_min: f64,
    /// Lane-change budget per vehicle and episode (C3).
    pub f_max: u32,
    /// Roadblocks move every this many episodes.
    pub relocation_period: usize,
    pub scenario: Scenario,
    pub grace_steps: u64,
    pub stall_speed: f64,
    pub stall_distance: f64,
    /// A merge is rough when someone brakes harder than this fraction of `b_decel`.
    pub rough_merge_decel_fraction: f64,
    pub roadblock_length: f64,
    pub roadblock_zone: (f64, f64),
    pub rewards: RewardConstants,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_agents: 4,
            max_steps: 1000,
            v_min: 2.0,
            f_max: 4,
            relocation_period: 10,
            scenario: Scenario::TwoLaneOneBlock,
            grace_steps: 50,
            stall_speed: 0.1,
            stall_distance: 10.0,
            rough_merge_decel_fraction: 0.5,
            roadblock_length: 10.0,
            roadblock_zone: (100.0, 250.0),
            rewards: RewardConstants::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.n_agents == 0 {
            return bad("n_agents must be >= 1");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1");
        }
        if self.f_max == 0 {
            return bad("f_max must be >= 1");
        }
        if self.v_min.is_nan() || self.v_min < 0.0 {
            return bad("v_min must be >= 0");
        }
        if self.relocation_period == 0 {
            return bad("relocation_period must be >= 1");
        }
        let (lo, hi) = self.roadblock_zone;
        if !(0.0 <= lo && lo <= hi && self.roadblock_length > 0.0) {
            return bad("roadblock zone must satisfy 0 <= lo <= hi and length > 0");
        }
        Ok(())
    }
}

/// Per-agent state vector, every entry normalised to `[0, 1]` except the
/// acceleration which lies in `[-1, 1]`.
///
/// Layout: own lead/lag gap, left lead/lag gap, right lead/lag gap, distance
/// to exit, distance to roadblock, acceleration, speed, position, lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_LEN]);

impl Observation {
    pub const ACCEL_INDEX: usize = 8;
    pub const SPEED_INDEX: usize = 9;
    pub const ROADBLOCK_INDEX: usize = 7;
    pub const EXIT_INDEX: usize = 6;

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Allowed range of entry `i`.
    pub fn bounds(i: usize) -> (f64, f64) {
        if i == Self::ACCEL_INDEX {
            (-1.0, 1.0)
        } else {
            (0.0, 1.0)
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| {
            let (lo, hi) = Self::bounds(i);
            v.is_finite() && v >= lo && v <= hi
        })
    }
}

fn nearest_roadblock_gap(world: &WorldState, veh: &VehicleState) -> Option<f64> {
    world
        .active_roadblocks()
        .filter(|rb| rb.lane == veh.lane && rb.x_end > veh.x)
        .map(|rb| rb.x_start - veh.x - world.config.vehicle_length)
        .min_by(f64::total_cmp)
}

pub fn build_observation(world: &WorldState, vehicle_id: usize) -> Result<Observation, SimError> {
    let veh = world.vehicle(vehicle_id)?;
    let cfg = &world.config;
    if !veh.is_active() {
        return Ok(departed_observation(world, veh));
    }
    let range = cfg.sensing_range;
    let norm = |n: Option<Neighbor>| n.map_or(1.0, |n| n.gap.clamp(0.0, range) / range);
    let lead = |lane: usize| norm(world.nearest_ahead(lane, veh.x, Some(veh.id)));
    let lag = |lane: usize| norm(world.nearest_behind(lane, veh.x, Some(veh.id)));
    let left = (veh.lane + 1 < cfg.lane_count).then_some(veh.lane + 1);
    let right = veh.lane.checked_sub(1);

    let d_exit = match &cfg.exit_ramp {
        Some(ExitRampSpec { x_start, x_end, .. }) if veh.x <= *x_end => (x_start - veh.x).max(0.0) / cfg.road_length,
        _ => 1.0,
    };
    let d_block = nearest_roadblock_gap(world, veh).map_or(1.0, |g| g.clamp(0.0, range) / range);

    Ok(Observation([
        lead(veh.lane),
        lag(veh.lane),
        left.map_or(1.0, lead),
        left.map_or(1.0, lag),
        right.map_or(1.0, lead),
        right.map_or(1.0, lag),
        d_exit.min(1.0),
        d_block,
        (veh.a / cfg.a_max).clamp(-1.0, 1.0),
        (veh.v / cfg.v_max).clamp(0.0, 1.0),
        (veh.x / cfg.road_length).clamp(0.0, 1.0),
        veh.lane as f64 / (cfg.lane_count - 1) as f64,
    ]))
}

/// Observation reported for a vehicle that has exited or finished: no
/// neighbours, no obstacles, zero speed.
pub fn departed_observation(world: &WorldState, veh: &VehicleState) -> Observation {
    let cfg = &world.config;
    Observation([
        1.0,
        1.0,
        1.0,
        1.0,
        1.0,
        1.0,
        1.0,
        1.0,
        0.0,
        0.0,
        (veh.x / cfg.road_length).clamp(0.0, 1.0),
        veh.lane as f64 / (cfg.lane_count - 1) as f64,
    ])
}

pub fn joint_observations(world: &WorldState, n_agents: usize) -> Result<Vec<Observation>, SimError> {
    (0..n_agents).map(|id| build_observation(world, id)).collect()
}

/// What the simulator did with an agent's action this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppliedAction {
    Kept,
    LaneChange {
        result: LaneChangeResult,
        /// Vehicle directly behind in the new lane right after the change.
        new_follower: Option<usize>,
    },
    Exit(ExitResult),
}

impl AppliedAction {
    pub fn lane_change_executed(&self) -> bool {
        matches!(
            self,
            AppliedAction::LaneChange {
                result: LaneChangeResult::Executed,
                ..
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardCase {
    Clean,
    RoughMerge,
    ExitTaken,
    Violation,
}

impl RewardCase {
    pub fn value(self, constants: &RewardConstants) -> f64 {
        match self {
            RewardCase::Clean => constants.clean,
            RewardCase::RoughMerge => constants.rough_merge,
            RewardCase::ExitTaken => constants.exit,
            RewardCase::Violation => constants.violation,
        }
    }
}

/// Reward case plus the individual violation reasons behind it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub case: RewardCase,
    pub stalled: bool,
    pub below_min_speed: bool,
    pub lane_budget_exceeded: bool,
}

pub fn classify_outcome(
    before: &WorldState,
    after: &WorldState,
    vehicle_id: usize,
    applied: AppliedAction,
    cfg: &EpisodeConfig,
) -> Result<Outcome, SimError> {
    let prev = before.vehicle(vehicle_id)?;
    let veh = after.vehicle(vehicle_id)?;
    let b_decel = after.config.b_decel;

    let stalled = veh.is_active()
        && veh.v < cfg.stall_speed
        && nearest_roadblock_gap(after, veh).is_some_and(|g| g < cfg.stall_distance);
    let below_min_speed = veh.is_active() && after.step_index > cfg.grace_steps && veh.v < cfg.v_min;
    let lane_budget_exceeded = veh.lane_changes_done > cfg.f_max;

    let rough = || {
        let AppliedAction::LaneChange {
            result: LaneChangeResult::Executed,
            new_follower,
        } = applied
        else {
            return false;
        };
        let limit = -cfg.rough_merge_decel_fraction * b_decel;
        let hard = |id: usize| after.vehicle(id).is_ok_and(|v| v.is_active() && v.a < limit);
        hard(vehicle_id) || new_follower.is_some_and(hard)
    };

    let case = if stalled || below_min_speed || lane_budget_exceeded {
        RewardCase::Violation
    } else if prev.status == VehicleStatus::Active && veh.status == VehicleStatus::Exited {
        RewardCase::ExitTaken
    } else if rough() {
        RewardCase::RoughMerge
    } else {
        RewardCase::Clean
    };
    Ok(Outcome {
        case,
        stalled,
        below_min_speed,
        lane_budget_exceeded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub case: RewardCase,
    pub case_value: f64,
    pub v_h: f64,
    pub total: f64,
}

pub fn compute_reward(case: RewardCase, v_h: f64, constants: &RewardConstants) -> RewardBreakdown {
    let case_value = case.value(constants);
    RewardBreakdown {
        case,
        case_value,
        v_h,
        total: case_value + v_h,
    }
}

/// Everything produced by one joint step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub world: WorldState,
    /// `None` for agents that had already left the road before this step.
    pub rewards: Vec<Option<RewardBreakdown>>,
    pub outcomes: Vec<Option<Outcome>>,
    pub applied: Vec<Option<AppliedAction>>,
    pub v_h: f64,
    pub done: bool,
}

impl StepOutput {
    /// Scalar reward per agent, zero for departed agents.
    pub fn scalar_rewards(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.map_or(0.0, |r| r.total)).collect()
    }
}

fn apply_action(world: &mut WorldState, id: usize, action: AgentAction) -> Result<AppliedAction, SimError> {
    let direction = match action {
        AgentAction::Keep => return Ok(AppliedAction::Kept),
        AgentAction::ChangeRight if world.exit_eligible(world.vehicle(id)?) => {
            return Ok(AppliedAction::Exit(world.take_exit(id)?));
        }
        AgentAction::ChangeRight => LaneDirection::Right,
        AgentAction::ChangeLeft => LaneDirection::Left,
    };
    let result = world.attempt_lane_change(id, direction)?;
    let new_follower = if result == LaneChangeResult::Executed {
        let veh = world.vehicle(id)?;
        world
            .nearest_behind(veh.lane, veh.x, Some(id))
            .and_then(|n| n.vehicle_id)
    } else {
        None
    };
    Ok(AppliedAction::LaneChange { result, new_follower })
}

pub fn env_step(world: &WorldState, actions: &[AgentAction], cfg: &EpisodeConfig) -> Result<StepOutput, EnvError> {
    let n = cfg.n_agents;
    if actions.len() != n {
        return Err(EnvError::ActionCountMismatch {
            expected: n,
            got: actions.len(),
        });
    }
    let mut next = world.clone();
    let mut applied = vec![None; n];
    for (id, &action) in actions.iter().enumerate() {
        if next.vehicle(id)?.is_active() {
            applied[id] = Some(apply_action(&mut next, id, action)?);
        }
    }
    next.step_longitudinal();

    let speeds: Vec<f64> = next.active_vehicles().map(|v| v.v).collect();
    let v_h = harmonic_mean_speed(&speeds);

    let mut outcomes = vec![None; n];
    let mut rewards = vec![None; n];
    for id in 0..n {
        if let Some(app) = applied[id] {
            let outcome = classify_outcome(world, &next, id, app, cfg)?;
            rewards[id] = Some(compute_reward(outcome.case, v_h, &cfg.rewards));
            outcomes[id] = Some(outcome);
        }
    }
    let all_departed = (0..n).all(|id| next.vehicle(id).map(|v| !v.is_active()).unwrap_or(true));
    let done = all_departed || next.step_index >= cfg.max_steps;
    Ok(StepOutput {
        world: next,
        rewards,
        outcomes,
        applied,
        v_h,
        done,
    })
}

/// splitmix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SPAWN_STREAM: u64 = 1;
const ROADBLOCK_STREAM: u64 = 2;

/// Roadblocks for the placement period containing `episode_index`.
pub fn place_roadblocks(episode_index: usize, cfg: &EpisodeConfig, highway: &HighwayConfig, seed: u64) -> Vec<RoadblockSpec> {
    let period = (episode_index / cfg.relocation_period) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ROADBLOCK_STREAM, period));
    let count = cfg.scenario.roadblock_count().min(highway.lane_count);
    let lanes = index::sample(&mut rng, highway.lane_count, count);
    let (lo, hi) = cfg.roadblock_zone;
    lanes
        .iter()
        .map(|lane| {
            let x_start = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            RoadblockSpec {
                lane,
                x_start,
                x_end: (x_start + cfg.roadblock_length).min(highway.road_length),
                active: true,
            }
        })
        .collect()
}

/// Fresh episode: new spawn, roadblocks for the current placement period.
///
/// `highway` is the base geometry; the scenario decides lane count and ramp.
pub fn reset_episode(
    episode_index: usize,
    cfg: &EpisodeConfig,
    highway: &HighwayConfig,
    seed: u64,
) -> Result<WorldState, EnvError> {
    cfg.validate()?;
    let highway = cfg.scenario.highway(highway);
    let spawn_seed = mix_seed(seed, SPAWN_STREAM, episode_index as u64);
    let mut world = spawn_vehicles(&highway, cfg.n_agents, spawn_seed)?;
    world.roadblocks = place_roadblocks(episode_index, cfg, &highway, seed);
    Ok(world)
}

/// One joint transition `(s, a, r, s', done)` as stored for learning.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub obs: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Observation>,
    pub done: bool,
}

impl TransitionRecord {
    pub fn n_agents(&self) -> usize {
        self.obs.len()
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.obs.len();
        self.actions.len() == n
            && self.rewards.len() == n
            && self.next_obs.len() == n
            && self.actions.iter().all(|&a| a < ACTION_COUNT)
    }
}

/// Per-step record kept for constraint accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub v_h: f64,
    pub outcomes: Vec<Option<Outcome>>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<StepSummary>,
    pub final_world: WorldState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Agent-steps below `v_min` after the grace period.
    pub c1_violations: u64,
    /// Lane changes beyond `f_max`, summed over agents.
    pub c3_violations: u64,
    pub lane_change_total: u64,
    pub exits: u64,
    /// Agent-steps spent stopped in front of a roadblock.
    pub roadblock_stalls: u64,
}

pub fn constraint_report(trace: &EpisodeTrace, cfg: &EpisodeConfig) -> ConstraintReport {
    let mut report = ConstraintReport::default();
    for outcome in trace.steps.iter().flat_map(|s| s.outcomes.iter().flatten()) {
        report.c1_violations += outcome.below_min_speed as u64;
        report.roadblock_stalls += outcome.stalled as u64;
    }
    for veh in &trace.final_world.vehicles {
        let changes = u64::from(veh.lane_changes_done);
        report.lane_change_total += changes;
        report.c3_violations += changes.saturating_sub(u64::from(cfg.f_max));
        report.exits += (veh.status == VehicleStatus::Exited) as u64;
    }
    report
}

/// Stateful episode runner used by the trainers.
#[derive(Debug, Clone)]
pub struct HighwayEnv {
    cfg: EpisodeConfig,
    highway: HighwayConfig,
    seed: u64,
    world: WorldState,
    steps: Vec<StepSummary>,
    done: bool,
}

impl HighwayEnv {
    pub fn new(cfg: EpisodeConfig, highway: HighwayConfig, seed: u64) -> Result<Self, EnvError> {
        let world = reset_episode(0, &cfg, &highway, seed)?;
        Ok(Self {
            cfg,
            highway,
            seed,
            world,
            steps: Vec::new(),
            done: false,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset(&mut self, episode_index: usize) -> Result<Vec<Observation>, EnvError> {
        self.world = reset_episode(episode_index, &self.cfg, &self.highway, self.seed)?;
        self.steps.clear();
        self.done = false;
        self.observations()
    }

    pub fn observations(&self) -> Result<Vec<Observation>, EnvError> {
        Ok(joint_observations(&self.world, self.cfg.n_agents)?)
    }

    pub fn step(&mut self, actions: &[AgentAction]) -> Result<StepOutput, EnvError> {
        let out = env_step(&self.world, actions, &self.cfg)?;
        self.world = out.world.clone();
        self.done = out.done;
        self.steps.push(StepSummary {
            v_h: out.v_h,
            outcomes: out.outcomes.clone(),
            rewards: out.scalar_rewards(),
        });
        Ok(out)
    }

    pub fn trace(&self) -> EpisodeTrace {
        EpisodeTrace {
            steps: self.steps.clone(),
            final_world: self.world.clone(),
        }
    }

    pub fn steps(&self) -> &[StepSummary] {
        &self.steps
    }

    pub fn constraint_report(&self) -> ConstraintReport {
        constraint_report(&self.trace(), &self.cfg)
    }
}
