//! Lane-based microscopic highway simulator.
//!
//! Vehicles follow a deterministic Krauss-style safe-speed law in their lane,
//! change lanes instantaneously when gap acceptance allows it and may leave
//! the road through an exit ramp attached to the rightmost lane. Roadblocks
//! are stationary obstructions that behave like a stopped leader of zero
//! length sitting at `x_start`.
//!
//! Positions refer to the rear bumper: a vehicle at `x` occupies
//! `[x, x + vehicle_length]`. Lane 0 is the rightmost lane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vehicles are spawned inside `[0, SPAWN_ZONE]` metres.
pub const SPAWN_ZONE: f64 = 50.0;

const KINEMATIC_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid highway config: {0}")]
    InvalidConfig(String),
    #[error("spawn zone of {zone} m cannot hold {n} vehicles")]
    InfeasiblePlacement { n: usize, zone: f64 },
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRampSpec {
    pub attach_lane: usize,
    pub x_start: f64,
    pub x_end: f64,
}

impl Default for ExitRampSpec {
    fn default() -> Self {
        Self {
            attach_lane: 0,
            x_start: 200.0,
            x_end: 250.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighwayConfig {
    pub road_length: f64,
    pub lane_count: usize,
    pub dt: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub b_decel: f64,
    pub vehicle_length: f64,
    pub min_gap: f64,
    /// Driver reaction time used by the safe-speed law.
    pub tau: f64,
    pub sensing_range: f64,
    pub exit_ramp: Option<ExitRampSpec>,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        Self {
            road_length: 300.0,
            lane_count: 3,
            dt: 0.1,
            v_max: 13.89,
            a_max: 2.6,
            b_decel: 4.5,
            vehicle_length: 5.0,
            min_gap: 2.5,
            tau: 1.0,
            sensing_range: 100.0,
            exit_ramp: None,
        }
    }
}

impl HighwayConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        let positive = [
            ("road_length", self.road_length),
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("b_decel", self.b_decel),
            ("vehicle_length", self.vehicle_length),
            ("tau", self.tau),
            ("sensing_range", self.sensing_range),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if !(2..=3).contains(&self.lane_count) {
            return bad("lane_count must be 2 or 3");
        }
        if !(self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return bad("min_gap must be >= 0");
        }
        if self.dt > self.tau {
            return bad("dt must not exceed tau");
        }
        if let Some(ramp) = &self.exit_ramp {
            if ramp.attach_lane >= self.lane_count {
                return bad("exit ramp lane out of range");
            }
            if !(0.0 <= ramp.x_start && ramp.x_start < ramp.x_end && ramp.x_end <= self.road_length)
            {
                return bad("exit ramp span must satisfy 0 <= x_start < x_end <= road_length");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleStatus {
    Active,
    Exited,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub lane: usize,
    pub x: f64,
    pub v: f64,
    /// Acceleration applied during the last step.
    pub a: f64,
    pub lane_changes_done: u32,
    pub status: VehicleStatus,
}

impl VehicleState {
    pub fn is_active(&self) -> bool {
        self.status == VehicleStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadblockSpec {
    pub lane: usize,
    pub x_start: f64,
    pub x_end: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneDirection {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneChangeResult {
    Executed,
    RejectedNoLane,
    RejectedGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitResult {
    Exited,
    RejectedNotEligible,
}

/// Nearest obstruction ahead of (or behind) a vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Net gap between bumpers in metres; negative when footprints overlap.
    pub gap: f64,
    pub speed: f64,
    /// `None` for roadblocks.
    pub vehicle_id: Option<usize>,
}

/// Krauss safe speed behind a leader, clamped below at zero.
pub fn safe_speed(v: f64, v_leader: f64, gap: f64, config: &HighwayConfig) -> f64 {
    let tau = config.tau;
    let net = gap - config.min_gap - v_leader * tau;
    let v_safe = v_leader + net / (tau + (v + v_leader) / (2.0 * config.b_decel));
    v_safe.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: HighwayConfig,
    pub vehicles: Vec<VehicleState>,
    pub roadblocks: Vec<RoadblockSpec>,
    pub step_index: u64,
    pub rng_seed: u64,
}

/// Places `n` vehicles round-robin across lanes, evenly spaced inside the
/// spawn zone, with speeds drawn from `[0.5, 0.8] * v_max`.
///
/// A follower whose drawn speed would need more than `b_decel` of braking on
/// the first step is slowed to the fastest admissible speed, so every spawned
/// world starts in a state the car-following law can handle.
pub fn spawn_vehicles(config: &HighwayConfig, n: usize, seed: u64) -> Result<WorldState, SimError> {
    config.validate()?;
    let slot = config.vehicle_length + config.min_gap;
    if n == 0 || n as f64 * slot > SPAWN_ZONE {
        return Err(SimError::InfeasiblePlacement { n, zone: SPAWN_ZONE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = SPAWN_ZONE / n as f64;
    let mut vehicles: Vec<VehicleState> = (0..n)
        .map(|id| VehicleState {
            id,
            lane: id % config.lane_count,
            x: id as f64 * spacing,
            v: rng.random_range(0.5 * config.v_max..=0.8 * config.v_max),
            a: 0.0,
            lane_changes_done: 0,
            status: VehicleStatus::Active,
        })
        .collect();

    // Front to back; ids increase with x so reverse id order is front first.
    for id in (0..n).rev() {
        let leader = id + config.lane_count;
        if leader < n {
            let gap = vehicles[leader].x - vehicles[id].x - config.vehicle_length;
            let v_leader = vehicles[leader].v;
            vehicles[id].v = brakeable_speed(vehicles[id].v, v_leader, gap, config);
        }
    }

    Ok(WorldState {
        config: config.clone(),
        vehicles,
        roadblocks: Vec::new(),
        step_index: 0,
        rng_seed: seed,
    })
}

/// Largest speed `<= v` from which the safe-speed law needs at most
/// `b_decel` of braking behind the given leader.
fn brakeable_speed(v: f64, v_leader: f64, gap: f64, config: &HighwayConfig) -> f64 {
    let brake = config.b_decel * config.dt;
    let ok = |s: f64| safe_speed(s, v_leader, gap, config) >= s - brake;
    if ok(v) {
        return v;
    }
    let (mut lo, mut hi) = (0.0, v);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

impl WorldState {
    pub fn vehicle(&self, id: usize) -> Result<&VehicleState, SimError> {
        self.vehicles
            .iter()
            .find(|veh| veh.id == id)
            .ok_or(SimError::UnknownVehicle(id))
    }

    fn index_of(&self, id: usize) -> Result<usize, SimError> {
        self.vehicles
            .iter()
            .position(|veh| veh.id == id)
            .ok_or(SimError::UnknownVehicle(id))
    }

    pub fn active_vehicles(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.iter().filter(|veh| veh.is_active())
    }

    pub fn active_roadblocks(&self) -> impl Iterator<Item = &RoadblockSpec> {
        self.roadblocks.iter().filter(|rb| rb.active)
    }

    /// Nearest obstruction at or ahead of position `x` in `lane`, ignoring
    /// vehicle `exclude`. Roadblocks that are not completely behind `x` count.
    pub fn nearest_ahead(&self, lane: usize, x: f64, exclude: Option<usize>) -> Option<Neighbor> {
        let len = self.config.vehicle_length;
        let vehicles = self
            .active_vehicles()
            .filter(|o| o.lane == lane && Some(o.id) != exclude && o.x >= x)
            .map(|o| Neighbor {
                gap: o.x - x - len,
                speed: o.v,
                vehicle_id: Some(o.id),
            });
        let blocks = self
            .active_roadblocks()
            .filter(|rb| rb.lane == lane && rb.x_end > x)
            .map(|rb| Neighbor {
                gap: rb.x_start - x - len,
                speed: 0.0,
                vehicle_id: None,
            });
        vehicles
            .chain(blocks)
            .min_by(|a, b| a.gap.total_cmp(&b.gap))
    }

    /// Nearest Active vehicle strictly behind position `x` in `lane`.
    pub fn nearest_behind(&self, lane: usize, x: f64, exclude: Option<usize>) -> Option<Neighbor> {
        let len = self.config.vehicle_length;
        self.active_vehicles()
            .filter(|o| o.lane == lane && Some(o.id) != exclude && o.x < x)
            .map(|o| Neighbor {
                gap: x - o.x - len,
                speed: o.v,
                vehicle_id: Some(o.id),
            })
            .min_by(|a, b| a.gap.total_cmp(&b.gap))
    }

    /// Nearest obstruction ahead in the vehicle's own lane within sensing range.
    pub fn effective_leader(&self, vehicle_id: usize) -> Result<Option<Neighbor>, SimError> {
        let veh = self.vehicle(vehicle_id)?;
        Ok(self
            .nearest_ahead(veh.lane, veh.x, Some(veh.id))
            .filter(|n| n.gap <= self.config.sensing_range))
    }

    /// Advances every Active vehicle by one time step.
    ///
    /// Speeds are updated synchronously from the current snapshot, then
    /// positions. Deceleration is bounded by `b_decel`.
    pub fn step_longitudinal(&mut self) {
        let cfg = &self.config;
        let next_speeds: Vec<Option<f64>> = self
            .vehicles
            .iter()
            .map(|veh| {
                if !veh.is_active() {
                    return None;
                }
                let mut v_next = (veh.v + cfg.a_max * cfg.dt).min(cfg.v_max);
                if let Some(lead) = self
                    .nearest_ahead(veh.lane, veh.x, Some(veh.id))
                    .filter(|n| n.gap <= cfg.sensing_range)
                {
                    v_next = v_next.min(safe_speed(veh.v, lead.speed, lead.gap, cfg));
                }
                v_next = v_next.max(veh.v - cfg.b_decel * cfg.dt);
                Some(v_next.clamp(0.0, cfg.v_max))
            })
            .collect();

        let (dt, road_length) = (self.config.dt, self.config.road_length);
        for (veh, v_next) in self.vehicles.iter_mut().zip(next_speeds) {
            let Some(v_next) = v_next else { continue };
            veh.a = (v_next - veh.v) / dt;
            veh.v = v_next;
            veh.x += v_next * dt;
            if veh.x >= road_length {
                veh.x = road_length;
                veh.status = VehicleStatus::Finished;
            }
        }
        self.step_index += 1;
    }

    /// Instantaneous lane change subject to gap acceptance in the target lane.
    ///
    /// Both the new leader and the new follower must sit at least `min_gap`
    /// away, and neither the changing vehicle nor its new follower may need
    /// more than `b_decel` of braking on the next step.
    pub fn attempt_lane_change(
        &mut self,
        vehicle_id: usize,
        direction: LaneDirection,
    ) -> Result<LaneChangeResult, SimError> {
        let idx = self.index_of(vehicle_id)?;
        let veh = &self.vehicles[idx];
        let target = match direction {
            LaneDirection::Left if veh.lane + 1 < self.config.lane_count => veh.lane + 1,
            LaneDirection::Right if veh.lane > 0 => veh.lane - 1,
            _ => return Ok(LaneChangeResult::RejectedNoLane),
        };
        if !self.gap_acceptable(veh, target) {
            return Ok(LaneChangeResult::RejectedGap);
        }
        let veh = &mut self.vehicles[idx];
        veh.lane = target;
        veh.lane_changes_done += 1;
        Ok(LaneChangeResult::Executed)
    }

    fn gap_acceptable(&self, veh: &VehicleState, target: usize) -> bool {
        let cfg = &self.config;
        let brake = cfg.b_decel * cfg.dt - KINEMATIC_EPS;
        if let Some(lead) = self.nearest_ahead(target, veh.x, Some(veh.id)) {
            if lead.gap < cfg.min_gap || safe_speed(veh.v, lead.speed, lead.gap, cfg) < veh.v - brake {
                return false;
            }
        }
        if let Some(lag) = self.nearest_behind(target, veh.x, Some(veh.id)) {
            if lag.gap < cfg.min_gap || safe_speed(lag.speed, veh.v, lag.gap, cfg) < lag.speed - brake {
                return false;
            }
        }
        true
    }

    pub fn exit_eligible(&self, veh: &VehicleState) -> bool {
        veh.is_active()
            && self.config.exit_ramp.as_ref().is_some_and(|ramp| {
                veh.lane == ramp.attach_lane && (ramp.x_start..=ramp.x_end).contains(&veh.x)
            })
    }

    pub fn take_exit(&mut self, vehicle_id: usize) -> Result<ExitResult, SimError> {
        let idx = self.index_of(vehicle_id)?;
        if !self.exit_eligible(&self.vehicles[idx]) {
            return Ok(ExitResult::RejectedNotEligible);
        }
        self.vehicles[idx].status = VehicleStatus::Exited;
        Ok(ExitResult::Exited)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} != {b} (tol {})", $tol);
        }};
    }

    fn three_lane() -> HighwayConfig {
        HighwayConfig::default()
    }

    fn two_lane() -> HighwayConfig {
        HighwayConfig {
            lane_count: 2,
            ..HighwayConfig::default()
        }
    }

    fn world_with(config: HighwayConfig, vehicles: &[(usize, f64, f64)]) -> WorldState {
        WorldState {
            config,
            vehicles: vehicles
                .iter()
                .enumerate()
                .map(|(id, &(lane, x, v))| VehicleState {
                    id,
                    lane,
                    x,
                    v,
                    a: 0.0,
                    lane_changes_done: 0,
                    status: VehicleStatus::Active,
                })
                .collect(),
            roadblocks: Vec::new(),
            step_index: 0,
            rng_seed: 0,
        }
    }

    fn block(lane: usize, x_start: f64) -> RoadblockSpec {
        RoadblockSpec {
            lane,
            x_start,
            x_end: x_start + 10.0,
            active: true,
        }
    }

    #[test]
    fn single_vehicle_spawn() {
        let w = spawn_vehicles(&three_lane(), 1, 7).unwrap();
        assert_eq!(w.vehicles.len(), 1);
        let v = &w.vehicles[0];
        assert_eq!((v.lane, v.x), (0, 0.0));
        assert!((6.945..=11.112).contains(&v.v));
    }

    #[test]
    fn round_robin_spawn() {
        let w = spawn_vehicles(&three_lane(), 4, 7).unwrap();
        let lanes: Vec<_> = w.vehicles.iter().map(|v| v.lane).collect();
        assert_eq!(lanes, vec![0, 1, 2, 0]);
        let gap = w.vehicles[3].x - w.vehicles[0].x - 5.0;
        assert!(gap >= 2.5);
    }

    #[test]
    fn infeasible_spawn() {
        // 30 * 7.5 m = 225 m > 50 m
        assert_eq!(
            spawn_vehicles(&two_lane(), 30, 1),
            Err(SimError::InfeasiblePlacement { n: 30, zone: 50.0 })
        );
    }

    #[test]
    fn dense_spawn_is_brakeable() {
        let cfg = two_lane();
        for seed in 0..50 {
            let w = spawn_vehicles(&cfg, 6, seed).unwrap();
            for veh in &w.vehicles {
                if let Some(lead) = w.effective_leader(veh.id).unwrap() {
                    let v_safe = safe_speed(veh.v, lead.speed, lead.gap, &cfg);
                    assert!(v_safe >= veh.v - cfg.b_decel * cfg.dt - 1e-9, "seed {seed} {veh:?} {lead:?} {v_safe}");
                }
            }
        }
    }

    #[test]
    fn leader_is_vehicle_or_roadblock() {
        let mut w = world_with(three_lane(), &[(0, 100.0, 10.0), (0, 150.0, 8.0)]);
        let lead = w.effective_leader(0).unwrap().unwrap();
        assert_close!(lead.gap, 45.0, 1e-12);
        assert_eq!(lead.speed, 8.0);

        w.vehicles.truncate(1);
        w.roadblocks.push(block(0, 150.0));
        let lead = w.effective_leader(0).unwrap().unwrap();
        assert_close!(lead.gap, 45.0, 1e-12);
        assert_eq!(lead.speed, 0.0);
        assert_eq!(lead.vehicle_id, None);
    }

    #[test]
    fn no_leader_beyond_sensing_range() {
        let mut w = world_with(three_lane(), &[(0, 100.0, 10.0)]);
        assert_eq!(w.effective_leader(0).unwrap(), None);
        w.roadblocks.push(block(0, 210.0));
        assert_eq!(w.effective_leader(0).unwrap(), None);
        assert_eq!(w.effective_leader(9), Err(SimError::UnknownVehicle(9)));
    }

    #[test]
    fn safe_speed_examples() {
        let cfg = three_lane();
        assert_eq!(safe_speed(10.0, 0.0, 2.5, &cfg), 0.0);
        assert_close!(safe_speed(10.0, 10.0, 42.5, &cfg), 10.0 + 30.0 / (1.0 + 20.0 / 9.0), 1e-12);
        assert_close!(safe_speed(10.0, 10.0, 42.5, &cfg), 19.310_344_827_586_2, 1e-9);
        assert!(safe_speed(0.0, 0.0, 1000.0, &cfg) > cfg.v_max);
    }

    #[test]
    fn free_flow_step() {
        let mut w = world_with(three_lane(), &[(0, 10.0, 10.0)]);
        w.step_longitudinal();
        let v = &w.vehicles[0];
        assert_close!(v.v, 10.26, 1e-12);
        assert_close!(v.x, 11.026, 1e-12);
        assert_close!(v.a, 2.6, 1e-9);
        assert_eq!(w.step_index, 1);
    }

    #[test]
    fn stopped_leader_at_zero_net_gap() {
        // Vehicle already stopped against the roadblock.
        let mut w = world_with(three_lane(), &[(0, 142.5, 0.0)]);
        w.roadblocks.push(block(0, 150.0));
        w.step_longitudinal();
        assert_eq!(w.vehicles[0].v, 0.0);
        assert_eq!(w.vehicles[0].x, 142.5);

        // Moving at 5 m/s: braking is bounded so it sheds b*dt.
        let mut w = world_with(three_lane(), &[(0, 142.5, 5.0)]);
        w.roadblocks.push(block(0, 150.0));
        w.step_longitudinal();
        assert_close!(w.vehicles[0].v, 4.55, 1e-12);
    }

    #[test]
    fn vehicles_finish_at_road_end() {
        let mut w = world_with(three_lane(), &[(1, 299.5, 13.0)]);
        w.step_longitudinal();
        assert_eq!(w.vehicles[0].status, VehicleStatus::Finished);
        assert_eq!(w.active_vehicles().count(), 0);
    }

    #[test]
    fn platoon_never_overlaps() {
        let mut w = world_with(three_lane(), &[(0, 0.0, 13.0), (0, 20.0, 2.0)]);
        w.roadblocks.push(block(0, 200.0));
        for _ in 0..1000 {
            let before = w.clone();
            w.step_longitudinal();
            let f = &w.vehicles[0];
            let l = &w.vehicles[1];
            if f.is_active() && l.is_active() {
                assert!(l.x - f.x >= 5.0, "overlap at step {}", w.step_index);
            }
            for (a, b) in before.vehicles.iter().zip(&w.vehicles) {
                assert!(b.x >= a.x);
                assert!(b.v - a.v >= -0.45 - 1e-9 && b.v - a.v <= 0.26 + 1e-9);
            }
        }
        // Both end up queued behind the roadblock.
        assert!(w.vehicles[1].x + 5.0 <= 200.0);
    }

    #[test]
    fn lane_change_boundaries_and_gaps() {
        let mut w = world_with(three_lane(), &[(0, 100.0, 10.0)]);
        assert_eq!(
            w.attempt_lane_change(0, LaneDirection::Right).unwrap(),
            LaneChangeResult::RejectedNoLane
        );
        assert_eq!(
            w.attempt_lane_change(0, LaneDirection::Left).unwrap(),
            LaneChangeResult::Executed
        );
        assert_eq!(w.vehicles[0].lane, 1);
        assert_eq!(w.vehicles[0].lane_changes_done, 1);

        // Follower in the target lane only 1 m behind.
        let mut w = world_with(three_lane(), &[(0, 100.0, 10.0), (1, 94.0, 10.0)]);
        let before = w.clone();
        assert_eq!(
            w.attempt_lane_change(0, LaneDirection::Left).unwrap(),
            LaneChangeResult::RejectedGap
        );
        assert_eq!(w, before);
        assert_eq!(
            w.attempt_lane_change(5, LaneDirection::Left),
            Err(SimError::UnknownVehicle(5))
        );
    }

    #[test]
    fn lane_change_rejected_alongside_roadblock() {
        let mut w = world_with(two_lane(), &[(0, 150.0, 5.0)]);
        w.roadblocks.push(block(1, 148.0));
        assert_eq!(
            w.attempt_lane_change(0, LaneDirection::Left).unwrap(),
            LaneChangeResult::RejectedGap
        );
    }

    #[test]
    fn exit_eligibility() {
        let cfg = HighwayConfig {
            exit_ramp: Some(ExitRampSpec::default()),
            ..three_lane()
        };
        let mut w = world_with(cfg.clone(), &[(0, 220.0, 10.0)]);
        assert_eq!(w.take_exit(0).unwrap(), ExitResult::Exited);
        assert_eq!(w.vehicles[0].status, VehicleStatus::Exited);

        let mut w = world_with(cfg.clone(), &[(1, 220.0, 10.0)]);
        assert_eq!(w.take_exit(0).unwrap(), ExitResult::RejectedNotEligible);
        let mut w = world_with(cfg, &[(0, 260.0, 10.0)]);
        assert_eq!(w.take_exit(0).unwrap(), ExitResult::RejectedNotEligible);
    }

    #[test]
    fn config_validation() {
        assert!(three_lane().validate().is_ok());
        let bad = HighwayConfig {
            lane_count: 4,
            ..three_lane()
        };
        assert!(bad.validate().is_err());
        let bad = HighwayConfig {
            dt: 0.0,
            ..three_lane()
        };
        assert!(bad.validate().is_err());
    }
}
