//! Greedy per-mode evaluation over stratified task suites.
//!
//! Evaluation decodes at temperature 0 (deterministic, lowest-id tie-break)
//! so a policy's accuracy, trigger rate, and token budgets are pure
//! functions of its parameters. Each suite is split into an easy and a hard
//! stratum at build time; every metric is reported per stratum and overall.

use alloc::vec::Vec;

use crate::policy::PolicyParams;
use crate::rng::{self, stream};
use crate::rollout::{generate_rollout, GenConfig, Mode, RealizedMode, RolloutError};
use crate::task::{sample_task_in_range, TaskInstance, TaskSpec};
use crate::vocab::Vocab;

/// Errors from suite construction and evaluation.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    /// Both strata of a suite are empty.
    #[error("evaluation suite is empty")]
    EmptySuite,
    /// Suite stratum bounds are inconsistent with the task spec.
    #[error("invalid suite bounds: {0}")]
    InvalidSuite(&'static str),
    /// Rollout generation failed.
    #[error("rollout error: {0}")]
    Rollout(#[from] RolloutError),
}

/// A held-out task suite with disjoint difficulty strata.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSuite {
    /// Tasks with `steps <= easy_threshold`.
    pub easy: Vec<TaskInstance>,
    /// Tasks with `steps >= hard_min_steps`.
    pub hard: Vec<TaskInstance>,
}

impl EvalSuite {
    /// Total number of tasks.
    pub fn len(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    /// Whether both strata are empty.
    pub fn is_empty(&self) -> bool {
        self.easy.is_empty() && self.hard.is_empty()
    }
}

/// Samples a stratified suite: `easy_count` tasks with step counts in
/// `[spec.min_steps, spec.easy_threshold]` and `hard_count` tasks in
/// `[hard_min_steps, spec.max_steps]`.
///
/// The strata must be disjoint (`hard_min_steps > easy_threshold`), so every
/// suite task is unambiguously easy or hard.
pub fn build_suite(
    spec: &TaskSpec,
    easy_count: usize,
    hard_count: usize,
    hard_min_steps: u32,
    vocab: &Vocab,
    seed: u64,
    stream_id: u64,
) -> Result<EvalSuite, EvalError> {
    if spec.min_steps > spec.easy_threshold {
        return Err(EvalError::InvalidSuite(
            "easy stratum is empty: min_steps exceeds easy_threshold",
        ));
    }
    if hard_min_steps <= spec.easy_threshold {
        return Err(EvalError::InvalidSuite(
            "hard_min_steps must exceed easy_threshold",
        ));
    }
    if hard_min_steps > spec.max_steps {
        return Err(EvalError::InvalidSuite(
            "hard_min_steps must not exceed max_steps",
        ));
    }
    let mut rng = rng::substream(seed, &[stream_id, stream::EVAL_SUITE]);
    let easy = (0..easy_count)
        .map(|_| sample_task_in_range(spec, spec.min_steps, spec.easy_threshold, vocab, &mut rng))
        .collect();
    let hard = (0..hard_count)
        .map(|_| sample_task_in_range(spec, hard_min_steps, spec.max_steps, vocab, &mut rng))
        .collect();
    Ok(EvalSuite { easy, hard })
}

/// Metrics for one stratum under one mode directive.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StratumEval {
    /// Number of tasks evaluated.
    pub count: usize,
    /// Fraction answered correctly (0 for an empty stratum).
    pub accuracy: f64,
    /// Mean generated tokens per response.
    pub mean_generated: f64,
    /// Mean reasoning-span length per response.
    pub mean_think_body: f64,
    /// Fraction of responses that realized thinking, for Auto directives;
    /// `None` for forced modes and empty strata (undefined, not zero).
    pub trigger_rate: Option<f64>,
}

/// Greedy evaluation of one mode directive over a suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalFragment {
    /// The directive evaluated.
    pub mode: Mode,
    /// Easy-stratum metrics.
    pub easy: StratumEval,
    /// Hard-stratum metrics.
    pub hard: StratumEval,
    /// Whole-suite metrics.
    pub overall: StratumEval,
}

struct StratumAccum {
    count: usize,
    correct: usize,
    generated: usize,
    body: usize,
    thinking: usize,
}

impl StratumAccum {
    fn new() -> Self {
        StratumAccum {
            count: 0,
            correct: 0,
            generated: 0,
            body: 0,
            thinking: 0,
        }
    }

    fn merge(&mut self, other: &StratumAccum) {
        self.count += other.count;
        self.correct += other.correct;
        self.generated += other.generated;
        self.body += other.body;
        self.thinking += other.thinking;
    }

    fn finish(&self, mode: Mode) -> StratumEval {
        let n = self.count as f64;
        StratumEval {
            count: self.count,
            accuracy: if self.count == 0 {
                0.0
            } else {
                self.correct as f64 / n
            },
            mean_generated: if self.count == 0 {
                0.0
            } else {
                self.generated as f64 / n
            },
            mean_think_body: if self.count == 0 {
                0.0
            } else {
                self.body as f64 / n
            },
            trigger_rate: match (mode, self.count) {
                (Mode::Auto, c) if c > 0 => Some(self.thinking as f64 / n),
                _ => None,
            },
        }
    }
}

/// Evaluates `params` on `suite` under one mode directive with greedy
/// decoding, reporting accuracy, token budgets, and (for Auto) the trigger
/// rate per stratum.
pub fn evaluate(
    params: &PolicyParams,
    suite: &EvalSuite,
    mode: Mode,
    max_gen_len: usize,
    vocab: &Vocab,
) -> Result<EvalFragment, EvalError> {
    if suite.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    let cfg = GenConfig {
        temperature: 0.0,
        max_gen_len,
    };
    // Greedy decoding consumes no randomness; the stream only satisfies the
    // sampler's interface.
    let mut rng = rng::substream(0, &[stream::EVAL_SUITE, u64::MAX]);
    let mut accums = [StratumAccum::new(), StratumAccum::new()];
    for (slot, tasks) in [(0usize, &suite.easy), (1usize, &suite.hard)] {
        for task in tasks {
            let ro = generate_rollout(params, task, mode, &cfg, vocab, &mut rng)?;
            let a = &mut accums[slot];
            a.count += 1;
            a.correct += (ro.reward == 1.0) as usize;
            a.generated += ro.generated_len();
            a.body += ro.think_body_len(vocab);
            a.thinking += (ro.realized_mode == RealizedMode::Thinking) as usize;
        }
    }
    let mut overall = StratumAccum::new();
    overall.merge(&accums[0]);
    overall.merge(&accums[1]);
    Ok(EvalFragment {
        mode,
        easy: accums[0].finish(mode),
        hard: accums[1].finish(mode),
        overall: overall.finish(mode),
    })
}

/// One probe: all three mode directives evaluated on the same suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeMetrics {
    /// Auto-directive results (source of trigger rates).
    pub auto_mode: EvalFragment,
    /// Forced-thinking results.
    pub forced_thinking: EvalFragment,
    /// Forced-non-thinking results.
    pub forced_nonthinking: EvalFragment,
}

/// Evaluates all three directives on `suite`.
pub fn probe(
    params: &PolicyParams,
    suite: &EvalSuite,
    max_gen_len: usize,
    vocab: &Vocab,
) -> Result<ProbeMetrics, EvalError> {
    Ok(ProbeMetrics {
        auto_mode: evaluate(params, suite, Mode::Auto, max_gen_len, vocab)?,
        forced_thinking: evaluate(params, suite, Mode::Thinking, max_gen_len, vocab)?,
        forced_nonthinking: evaluate(params, suite, Mode::NonThinking, max_gen_len, vocab)?,
    })
}
