//! Randomised safety and determinism checks for the simulator and the MDP.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadblock_core::env::{
    build_observation, env_step, harmonic_mean_speed, reset_episode, AgentAction, EpisodeConfig, RewardCase,
    Scenario,
};
use roadblock_core::sim::{HighwayConfig, LaneDirection, WorldState};

const EPS: f64 = 1e-9;

/// Exhaustive scan: same-lane Active vehicles keep at least a vehicle length apart.
fn overlaps(world: &WorldState) -> usize {
    let len = world.config.vehicle_length;
    let active: Vec<_> = world.vehicles.iter().filter(|v| v.is_active()).collect();
    let mut count = 0;
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            if a.lane == b.lane && (a.x - b.x).abs() < len - EPS {
                count += 1;
            }
        }
        for rb in world.roadblocks.iter().filter(|rb| rb.active && rb.lane == a.lane) {
            if a.x + len > rb.x_start + EPS && a.x < rb.x_end {
                count += 1;
            }
        }
    }
    count
}

fn kinematic_violations(before: &WorldState, after: &WorldState) -> usize {
    let cfg = &before.config;
    before
        .vehicles
        .iter()
        .zip(&after.vehicles)
        .filter(|(b, _)| b.is_active())
        .filter(|(b, a)| {
            let dv = a.v - b.v;
            a.v < 0.0
                || a.v > cfg.v_max
                || dv < -cfg.b_decel * cfg.dt - EPS
                || dv > cfg.a_max * cfg.dt + EPS
                || a.x < b.x
        })
        .count()
}

fn random_actions(rng: &mut ChaCha8Rng, n: usize) -> Vec<AgentAction> {
    (0..n)
        .map(|_| AgentAction::from_index(rng.random_range(0..3)).unwrap())
        .collect()
}

#[test]
fn random_episodes_are_safe() {
    let highway = HighwayConfig::default();
    for scenario in [Scenario::ThreeLaneTwoBlocks, Scenario::TwoLaneOneBlock] {
        for n_agents in [2, 4, 6] {
            let cfg = EpisodeConfig {
                n_agents,
                scenario,
                max_steps: 600,
                ..EpisodeConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(n_agents as u64);
            for episode in 0..40 {
                let mut world = reset_episode(episode, &cfg, &highway, 17).unwrap();
                assert_eq!(overlaps(&world), 0);
                loop {
                    let out = env_step(&world, &random_actions(&mut rng, n_agents), &cfg).unwrap();
                    assert_eq!(overlaps(&out.world), 0, "overlap in {scenario:?} episode {episode}");
                    assert_eq!(kinematic_violations(&world, &out.world), 0);
                    for id in 0..n_agents {
                        assert!(build_observation(&out.world, id).unwrap().in_bounds());
                    }
                    for r in out.rewards.iter().flatten() {
                        assert!([2.0, 1.0, 0.0, -2.0].contains(&r.case_value));
                        assert!((r.total - r.case_value - r.v_h).abs() < 1e-12);
                    }
                    world = out.world;
                    if out.done {
                        break;
                    }
                }
            }
        }
    }
}

#[test]
fn episodes_are_deterministic() {
    let highway = HighwayConfig::default();
    let cfg = EpisodeConfig::default();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut world = reset_episode(3, &cfg, &highway, 8).unwrap();
        let mut trajectory = vec![world.clone()];
        for _ in 0..300 {
            let out = env_step(&world, &random_actions(&mut rng, cfg.n_agents), &cfg).unwrap();
            world = out.world;
            trajectory.push(world.clone());
        }
        trajectory
    };
    assert_eq!(run(), run());
}

#[test]
fn rough_merges_happen_under_random_play() {
    // Sanity check that every reward case is reachable.
    let highway = HighwayConfig::default();
    let cfg = EpisodeConfig {
        n_agents: 6,
        scenario: Scenario::ThreeLaneTwoBlocks,
        ..EpisodeConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = std::collections::HashSet::new();
    for episode in 0..60 {
        let mut world = reset_episode(episode, &cfg, &highway, 2).unwrap();
        loop {
            let out = env_step(&world, &random_actions(&mut rng, 6), &cfg).unwrap();
            seen.extend(out.rewards.iter().flatten().map(|r| r.case));
            world = out.world;
            if out.done {
                break;
            }
        }
    }
    for case in [RewardCase::Clean, RewardCase::RoughMerge, RewardCase::ExitTaken, RewardCase::Violation] {
        assert!(seen.contains(&case), "{case:?} never observed");
    }
}

proptest! {
    #[test]
    fn harmonic_mean_below_arithmetic_mean(speeds in prop::collection::vec(0.0f64..20.0, 1..12)) {
        let hm = harmonic_mean_speed(&speeds);
        let clamped: Vec<f64> = speeds.iter().map(|v| v.max(0.1)).collect();
        let am = clamped.iter().sum::<f64>() / clamped.len() as f64;
        prop_assert!(hm <= am * (1.0 + 1e-12));
    }

    #[test]
    fn rejected_lane_change_leaves_world_untouched(
        seed in 0u64..500,
        steps in 0usize..200,
        vehicle in 0usize..6,
        left in any::<bool>(),
    ) {
        let cfg = EpisodeConfig { n_agents: 6, ..EpisodeConfig::default() };
        let mut world = reset_episode(0, &cfg, &HighwayConfig::default(), seed).unwrap();
        for _ in 0..steps {
            world.step_longitudinal();
        }
        if world.vehicles[vehicle].is_active() {
            let before = world.clone();
            let dir = if left { LaneDirection::Left } else { LaneDirection::Right };
            let result = world.attempt_lane_change(vehicle, dir).unwrap();
            if result == roadblock_core::sim::LaneChangeResult::Executed {
                prop_assert_eq!(world.vehicles[vehicle].lane_changes_done, before.vehicles[vehicle].lane_changes_done + 1);
            } else {
                prop_assert_eq!(world, before);
            }
        }
    }
}
