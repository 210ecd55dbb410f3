//! Multi-agent roadblock avoidance on a short highway.
//!
//! * [`sim`]: deterministic lane-based microsimulator.
//! * [`env`]: the multi-agent MDP on top of it (observations, actions, rewards, episodes).
//! * [`nn`]: dense networks, Adam, Gumbel-softmax, checkpoints.
//! * [`maddpg`]: centralized-critic actor-critic trainer.
//! * [`dqn`]: independent DQN baseline.
//! * [`train`], [`replay`]: shared training configuration, logs and experience storage.

pub mod dqn;
pub mod env;
pub mod maddpg;
pub mod nn;
pub mod replay;
pub mod sim;
pub mod train;
