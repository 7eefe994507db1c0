//! Multi-objective curriculum learning core.
//!
//! A single recurrent hyper-network generates the parameters of three small
//! curriculum generators (subgoals, initial states, potential-based reward
//! shaping) and writes an abstract curriculum into a memory matrix that a
//! PPO agent reads. The hyper-network is trained by differentiating an outer
//! Bellman-style loss through truncated inner critic updates.
//!
//! The crate is `no_std` + `alloc`; file formats, the CLI and plotting live
//! in the `moc` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agent;
pub mod buffer;
pub mod curricula;
pub mod envs;
pub mod hypernet;
pub mod memory;
pub mod metrics;
pub mod error;
pub mod nn;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod visitation;

pub use error::{Error, Result};
