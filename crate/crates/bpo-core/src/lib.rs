//! Deterministic, dependency-light core for a desk-scale study of bi-mode
//! policy optimization: training a tiny language model that decides, per
//! query, whether to emit an explicit reasoning trace before its answer.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation over
//! in-memory buffers. Task generation, the policy network and its manual
//! gradients, rollout sampling, the clipped-surrogate objectives, corpus
//! curation, and supervised annealing all live in this crate. File formats,
//! configuration, and the command-line harness live in the companion
//! `bpo-lab` crate.
//!
//! Layout:
//!
//! * [`vocab`] — the fixed 22-token vocabulary and token masks.
//! * [`task`] — modular-arithmetic tasks, the reward oracle, teacher traces.
//! * [`policy`] — the windowed MLP policy, sampling, log-probabilities, and
//!   exact manual gradients with a finite-difference checker.
//! * [`checkpoint`] — byte-exact parameter serialization.
//! * [`rollout`] — mode conditioning, rollout generation, bi-mode groups,
//!   and token-budget statistics.
//! * [`optim`] — group-relative advantages, the clipped surrogate with a KL
//!   penalty, Adam, and the reinforcement-learning training loop.
//! * [`anneal`] — corpus curation heuristics, filtering, and supervised
//!   annealing of the curated corpus.
//! * [`eval`] — greedy per-mode evaluation over task suites.
//! * [`rng`] — named deterministic random-number substreams.

#![no_std]
#![deny(missing_docs)]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod anneal;
pub mod checkpoint;
pub mod eval;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod task;
pub mod vocab;
