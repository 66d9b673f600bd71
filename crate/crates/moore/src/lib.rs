//! Desk-scale multi-task reinforcement-learning lab.
//!
//! A mixture of experts is made diverse by differentiable Gram-Schmidt
//! orthonormalization; task-specific weights interpolate the resulting
//! orthonormal basis into per-task representations consumed by policy and
//! value heads. Two trainers (clipped-surrogate on-policy, maximum-entropy
//! off-policy), grid and point task suites, and an experiment runner sit on
//! top.

pub mod cli;
pub mod envs;
pub mod expman;
pub mod logging;
pub mod mixture;
pub mod numkit;
pub mod rl;
pub mod verify;
