//! Experiment harness for the bi-mode policy laboratory.
//!
//! The numerical substance — tasks, the policy network, rollouts, both
//! training stages, evaluation — lives in `bpo-core`, which never touches a
//! filesystem. This crate owns everything around it: the TOML run
//! configuration, the curate → SFT → RL → eval orchestration, run
//! directories and their artifacts (corpus, checkpoints, metrics stream,
//! manifest), report generation, and a self-check suite that verifies the
//! core's gradients and estimators against independently built
//! expectations.
//!
//! Reproducibility contract: a run is a pure function of its config and
//! seed. Every artifact except the manifest (which records wall-clock) is
//! byte-identical across reruns.

#![deny(missing_docs)]
#![forbid(unsafe_code)]

pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod selfcheck;
pub mod suite;
