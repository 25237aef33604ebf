//! Mode-conditioned rollout generation and token-budget statistics.
//!
//! The response region of every prompt opens with `<think>`. The three mode
//! directives differ only in what happens immediately after it:
//!
//! * **Thinking** — the prompt ends at `<think>` and the *first* generated
//!   token may not be `</think>`, so the reasoning span is non-empty.
//! * **NonThinking** — the prompt itself continues `</think>`, so the model
//!   starts directly at the answer and can never produce a reasoning span.
//! * **Auto** — the prompt ends at `<think>` with no mask; the model's own
//!   first token decides the realized mode.
//!
//! A rollout realizes NonThinking exactly when the token after `<think>` is
//! `</think>`. Generation stops at `<eos>` or after `max_gen_len` tokens;
//! stopping without `<eos>` marks the rollout truncated (and the reward
//! oracle then fails it on format).

use alloc::vec::Vec;
use rand::Rng;

use crate::policy::{self, MaskSpec, PolicyError, PolicyParams};
use crate::task::{self, TaskInstance};
use crate::vocab::{Token, TokenMask, Vocab};

/// Errors from rollout generation and aggregation.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum RolloutError {
    /// A policy operation failed.
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
    /// A statistics aggregate was asked for zero rollouts.
    #[error("no rollouts to aggregate")]
    EmptyInput,
    /// Generation config fields are out of range.
    #[error("invalid generation config: {0}")]
    InvalidGenConfig(&'static str),
    /// A bi-mode group does not have the required number of rollouts.
    #[error("group has {got} {side} rollouts, expected {expected}")]
    WrongGroupSize {
        /// `"thinking"` or `"non-thinking"`.
        side: &'static str,
        /// Required count.
        expected: usize,
        /// Actual count.
        got: usize,
    },
    /// A forced-mode rollout realized the opposite mode.
    #[error("rollout {index} violates its forced mode directive")]
    ForcedModeViolation {
        /// Index within its side of the group.
        index: usize,
    },
    /// A forced-thinking rollout has an empty reasoning span, or a forced
    /// non-thinking rollout a non-empty one.
    #[error("rollout {index} has a reasoning span of {got} tokens, which its directive forbids")]
    ThinkSpanViolation {
        /// Index within its side of the group.
        index: usize,
        /// Observed reasoning-span length.
        got: usize,
    },
}

/// Mode directive used to condition a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Force a non-empty reasoning span.
    Thinking,
    /// Force an empty reasoning span.
    NonThinking,
    /// Let the policy choose.
    Auto,
}

/// The mode a finished rollout actually realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RealizedMode {
    /// The response contains a non-empty reasoning span.
    Thinking,
    /// The response closes its reasoning span immediately.
    NonThinking,
}

/// Sampling controls for rollout generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenConfig {
    /// Softmax temperature; 0 decodes greedily.
    pub temperature: f64,
    /// Maximum number of generated tokens per rollout (`>= 2`).
    pub max_gen_len: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            temperature: 1.0,
            max_gen_len: 24,
        }
    }
}

impl GenConfig {
    /// Checks field ranges.
    pub fn validate(&self) -> Result<(), RolloutError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(RolloutError::InvalidGenConfig(
                "temperature must be finite and >= 0",
            ));
        }
        if self.max_gen_len < 2 {
            return Err(RolloutError::InvalidGenConfig("max_gen_len must be >= 2"));
        }
        Ok(())
    }
}

/// One finished rollout with everything later stages need to re-score it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Prompt tokens: `<bos> query <sep>` plus the mode prefix.
    pub prompt: Vec<Token>,
    /// Generated tokens (everything the policy sampled).
    pub generated: Vec<Token>,
    /// The directive this rollout was conditioned on.
    pub mode_directive: Mode,
    /// The mode the finished response realizes.
    pub realized_mode: RealizedMode,
    /// Log-probability of each generated token at sampling time, under the
    /// same masked softmax a later re-scoring would use.
    pub old_logprobs: Vec<f64>,
    /// Per-position token masks for the generated span.
    pub mask_spec: MaskSpec,
    /// Binary reward from the task oracle.
    pub reward: f64,
    /// Group-relative advantage; 0 until an optimizer assigns one.
    pub advantage: f64,
    /// Whether generation hit the length budget without emitting `<eos>`.
    pub truncated: bool,
}

impl Rollout {
    /// Number of prompt tokens.
    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Prompt and generated tokens as one sequence.
    pub fn full_tokens(&self) -> Vec<Token> {
        let mut toks = Vec::with_capacity(self.prompt.len() + self.generated.len());
        toks.extend_from_slice(&self.prompt);
        toks.extend_from_slice(&self.generated);
        toks
    }

    /// The response region: mode prefix plus generated tokens (everything
    /// after `<sep>`). This is what the reward oracle grades.
    pub fn response(&self, vocab: &Vocab) -> Vec<Token> {
        let sep_at = self
            .prompt
            .iter()
            .position(|&t| t == vocab.sep())
            .map(|i| i + 1)
            .unwrap_or(self.prompt.len());
        let mut resp = Vec::with_capacity(self.prompt.len() - sep_at + self.generated.len());
        resp.extend_from_slice(&self.prompt[sep_at..]);
        resp.extend_from_slice(&self.generated);
        resp
    }

    /// Length of the reasoning span: tokens strictly between `<think>` and
    /// the first `</think>` (or the end of the response if never closed).
    pub fn think_body_len(&self, vocab: &Vocab) -> usize {
        let resp = self.response(vocab);
        if resp.first() != Some(&vocab.think_open()) {
            return 0;
        }
        let body = &resp[1..];
        body.iter()
            .position(|&t| t == vocab.think_close())
            .unwrap_or(body.len())
    }

    /// Number of generated tokens.
    pub fn generated_len(&self) -> usize {
        self.generated.len()
    }
}

/// The response-region prefix and first-step mask implementing `mode`.
pub fn mode_prefix(mode: Mode, vocab: &Vocab) -> (Vec<Token>, MaskSpec) {
    match mode {
        Mode::Thinking => (
            alloc::vec![vocab.think_open()],
            MaskSpec::first_step(TokenMask::banning(&[vocab.think_close()])),
        ),
        Mode::NonThinking => (
            alloc::vec![vocab.think_open(), vocab.think_close()],
            MaskSpec::none(),
        ),
        Mode::Auto => (alloc::vec![vocab.think_open()], MaskSpec::none()),
    }
}

/// The full prompt for `task` under `mode`: `<bos> query <sep>` plus the
/// mode prefix, along with the mask spec for the generated span.
pub fn build_prompt(task: &TaskInstance, mode: Mode, vocab: &Vocab) -> (Vec<Token>, MaskSpec) {
    let (prefix, mask_spec) = mode_prefix(mode, vocab);
    let mut prompt = Vec::with_capacity(task.query.len() + prefix.len() + 2);
    prompt.push(vocab.bos());
    prompt.extend_from_slice(&task.query);
    prompt.push(vocab.sep());
    prompt.extend_from_slice(&prefix);
    (prompt, mask_spec)
}

/// The realized mode of a response region (`<think>` at position 0):
/// NonThinking exactly when the next token closes the span immediately.
pub fn classify_mode(response: &[Token], vocab: &Vocab) -> RealizedMode {
    if response.get(1) == Some(&vocab.think_close()) {
        RealizedMode::NonThinking
    } else {
        RealizedMode::Thinking
    }
}

/// Samples one rollout of `task` under `mode` and grades it.
pub fn generate_rollout(
    params: &PolicyParams,
    task: &TaskInstance,
    mode: Mode,
    cfg: &GenConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Rollout, RolloutError> {
    cfg.validate()?;
    let (prompt, mask_spec) = build_prompt(task, mode, vocab);
    let window = params.dims().window;
    let mut tokens = prompt.clone();
    let mut generated = Vec::new();
    let mut old_logprobs = Vec::new();

    for step in 0..cfg.max_gen_len {
        let ctx = policy::context_window(&tokens, tokens.len(), window, vocab.pad());
        let logits = policy::logits(params, &ctx)?;
        let mask = mask_spec.at(step);
        let tok = policy::sample_from_logits(&logits, cfg.temperature, mask, rng)?;
        // Score from the same logits and mask the sampler used, so stored
        // log-probabilities are bit-identical to any later re-scoring.
        old_logprobs.push(policy::log_prob_of(&logits, mask, tok)?);
        tokens.push(tok);
        generated.push(tok);
        if tok == vocab.eos() {
            break;
        }
    }

    let truncated = generated.last() != Some(&vocab.eos());
    let mut rollout = Rollout {
        prompt,
        generated,
        mode_directive: mode,
        realized_mode: RealizedMode::Thinking,
        old_logprobs,
        mask_spec,
        reward: 0.0,
        advantage: 0.0,
        truncated,
    };
    let response = rollout.response(vocab);
    rollout.realized_mode = match mode {
        Mode::NonThinking => RealizedMode::NonThinking,
        Mode::Thinking | Mode::Auto => classify_mode(&response, vocab),
    };
    rollout.reward = task::verify_answer(task, &response, vocab).value;
    Ok(rollout)
}

/// A bi-mode rollout group: `g` forced-thinking plus `g` forced-non-thinking
/// rollouts of the same query.
#[derive(Clone, Debug, PartialEq)]
pub struct BimodeGroup {
    /// Forced-thinking rollouts.
    pub thinking: Vec<Rollout>,
    /// Forced-non-thinking rollouts.
    pub nonthinking: Vec<Rollout>,
}

impl BimodeGroup {
    /// All rollouts, thinking side first (the canonical flat order).
    pub fn all(&self) -> impl Iterator<Item = &Rollout> {
        self.thinking.iter().chain(self.nonthinking.iter())
    }

    /// Mutable view in the same canonical order.
    pub fn all_mut(&mut self) -> impl Iterator<Item = &mut Rollout> {
        self.thinking.iter_mut().chain(self.nonthinking.iter_mut())
    }

    /// Total rollout count (`2g`).
    pub fn len(&self) -> usize {
        self.thinking.len() + self.nonthinking.len()
    }

    /// Whether the group is empty.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rewards in canonical order.
    pub fn rewards(&self) -> Vec<f64> {
        self.all().map(|r| r.reward).collect()
    }

    /// Checks the structural contract: exactly `g` rollouts per side, every
    /// forced-thinking rollout realized thinking with a non-empty reasoning
    /// span, every forced-non-thinking rollout realized non-thinking with an
    /// empty span.
    pub fn validate(&self, g: usize, vocab: &Vocab) -> Result<(), RolloutError> {
        if self.thinking.len() != g {
            return Err(RolloutError::WrongGroupSize {
                side: "thinking",
                expected: g,
                got: self.thinking.len(),
            });
        }
        if self.nonthinking.len() != g {
            return Err(RolloutError::WrongGroupSize {
                side: "non-thinking",
                expected: g,
                got: self.nonthinking.len(),
            });
        }
        for (index, r) in self.thinking.iter().enumerate() {
            if r.mode_directive != Mode::Thinking || r.realized_mode != RealizedMode::Thinking {
                return Err(RolloutError::ForcedModeViolation { index });
            }
            let body = r.think_body_len(vocab);
            if body == 0 {
                return Err(RolloutError::ThinkSpanViolation { index, got: body });
            }
        }
        for (index, r) in self.nonthinking.iter().enumerate() {
            if r.mode_directive != Mode::NonThinking
                || r.realized_mode != RealizedMode::NonThinking
            {
                return Err(RolloutError::ForcedModeViolation { index });
            }
            let body = r.think_body_len(vocab);
            if body != 0 {
                return Err(RolloutError::ThinkSpanViolation { index, got: body });
            }
        }
        Ok(())
    }
}

/// Samples the bi-mode group for one query: `g` thinking rollouts followed
/// by `g` non-thinking rollouts, all from one generator.
pub fn generate_bimode_group(
    params: &PolicyParams,
    task: &TaskInstance,
    g: usize,
    cfg: &GenConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<BimodeGroup, RolloutError> {
    let mut thinking = Vec::with_capacity(g);
    for _ in 0..g {
        thinking.push(generate_rollout(params, task, Mode::Thinking, cfg, vocab, rng)?);
    }
    let mut nonthinking = Vec::with_capacity(g);
    for _ in 0..g {
        nonthinking.push(generate_rollout(
            params,
            task,
            Mode::NonThinking,
            cfg,
            vocab,
            rng,
        )?);
    }
    Ok(BimodeGroup {
        thinking,
        nonthinking,
    })
}

/// Samples `count` Auto-mode rollouts of one query (the single-mode group a
/// conventional group-relative baseline trains on).
pub fn generate_auto_group(
    params: &PolicyParams,
    task: &TaskInstance,
    count: usize,
    cfg: &GenConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<Vec<Rollout>, RolloutError> {
    (0..count)
        .map(|_| generate_rollout(params, task, Mode::Auto, cfg, vocab, rng))
        .collect()
}

/// Token statistics for one stratum of rollouts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StratumStats {
    /// Number of rollouts.
    pub count: usize,
    /// Mean generated length.
    pub mean_generated: f64,
    /// Mean reasoning-span length.
    pub mean_think_body: f64,
    /// Number of Auto-directed rollouts in the stratum.
    pub auto_total: usize,
    /// Number of Auto-directed rollouts that realized thinking.
    pub auto_thinking: usize,
}

impl StratumStats {
    /// Fraction of Auto rollouts that realized thinking; `None` when the
    /// stratum has no Auto rollouts (the rate is undefined, not zero).
    pub fn trigger_rate(&self) -> Option<f64> {
        if self.auto_total == 0 {
            None
        } else {
            Some(self.auto_thinking as f64 / self.auto_total as f64)
        }
    }
}

/// Token statistics split by task difficulty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenStats {
    /// Rollouts of easy tasks.
    pub easy: StratumStats,
    /// Rollouts of hard tasks.
    pub hard: StratumStats,
    /// All rollouts.
    pub overall: StratumStats,
}

fn stratum_of(entries: &[(bool, &Rollout)], pick_easy: Option<bool>, vocab: &Vocab) -> StratumStats {
    let mut count = 0usize;
    let mut generated = 0usize;
    let mut body = 0usize;
    let mut auto_total = 0usize;
    let mut auto_thinking = 0usize;
    for &(easy, r) in entries {
        if pick_easy.is_some_and(|want| want != easy) {
            continue;
        }
        count += 1;
        generated += r.generated_len();
        body += r.think_body_len(vocab);
        if r.mode_directive == Mode::Auto {
            auto_total += 1;
            if r.realized_mode == RealizedMode::Thinking {
                auto_thinking += 1;
            }
        }
    }
    StratumStats {
        count,
        mean_generated: if count == 0 {
            0.0
        } else {
            generated as f64 / count as f64
        },
        mean_think_body: if count == 0 {
            0.0
        } else {
            body as f64 / count as f64
        },
        auto_total,
        auto_thinking,
    }
}

/// Aggregates token statistics over `(is_easy, rollout)` pairs.
pub fn token_stats(entries: &[(bool, &Rollout)], vocab: &Vocab) -> Result<TokenStats, RolloutError> {
    if entries.is_empty() {
        return Err(RolloutError::EmptyInput);
    }
    Ok(TokenStats {
        easy: stratum_of(entries, Some(true), vocab),
        hard: stratum_of(entries, Some(false), vocab),
        overall: stratum_of(entries, None, vocab),
    })
}
