//! Group-relative advantages, the clipped-surrogate objective with a KL
//! penalty, Adam, and the reinforcement-learning training loop.
//!
//! The objective maximized over a batch of K rollouts with per-token
//! importance ratios `r = exp(logp_theta - logp_old)` and group-relative
//! advantage `A` is
//!
//! ```text
//! J = (1/K) * sum_k [ mean_t min(r*A, clip(r, 1-eps, 1+eps)*A)
//!                     - beta * mean_t kl(logp_theta, logp_ref) ]
//! ```
//!
//! where `kl` is the non-negative per-token estimator
//! `exp(u) - u - 1` with `u = logp_ref - logp_theta` (computed via `expm1`
//! so it stays non-negative even for vanishingly small `u`). The gradient
//! reduces, per token, to a scalar weight on `d logp_theta / d theta`:
//! `r*A` when the clip is inactive, 0 when the ratio has been clipped on its
//! losing side, plus `beta * expm1(u)` from the penalty. Those weights feed
//! the single backpropagation primitive in [`crate::policy`].
//!
//! Two samplers share this objective: the bi-mode trainer draws `g` forced
//! thinking plus `g` forced non-thinking rollouts per query, while the
//! conventional baseline draws `2g` Auto rollouts. The baseline is what
//! exhibits mode collapse; the bi-mode sampler exists to prevent it.

use alloc::string::String;
use alloc::vec::Vec;

use crate::eval::{self, EvalError, EvalSuite, ProbeMetrics};
use crate::policy::{
    accumulate_weighted_grad, logprob_sequence, GradientVector, PolicyError, PolicyParams,
};
use crate::rng::{self, stream};
use crate::rollout::{
    generate_auto_group, generate_bimode_group, BimodeGroup, GenConfig, RealizedMode, Rollout,
    RolloutError, TokenStats,
};
use crate::task::{sample_task, TaskError, TaskInstance, TaskSpec};
use crate::vocab::{Token, Vocab};

/// Errors from objective evaluation and training.
#[derive(Debug, PartialEq, thiserror::Error)]
pub enum OptimError {
    /// A config field violates its documented range.
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(&'static str),
    /// A policy operation failed.
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
    /// Rollout generation failed.
    #[error("rollout error: {0}")]
    Rollout(#[from] RolloutError),
    /// A probe evaluation failed.
    #[error("evaluation error: {0}")]
    Eval(#[from] EvalError),
    /// The task spec is invalid.
    #[error("task error: {0}")]
    Task(#[from] TaskError),
    /// An objective was evaluated over zero rollouts.
    #[error("objective evaluated over an empty batch")]
    EmptyBatch,
    /// A rollout has no generated tokens.
    #[error("rollout {index} has an empty generated span")]
    EmptyRollout {
        /// Index in the flattened batch.
        index: usize,
    },
    /// A rollout's stored sampling-time log-probabilities do not cover its
    /// generated span.
    #[error("rollout {index} stores {got} old logprobs for {expected} generated tokens")]
    OldLogprobMismatch {
        /// Index in the flattened batch.
        index: usize,
        /// Generated-span length.
        expected: usize,
        /// Stored log-probability count.
        got: usize,
    },
    /// A non-finite value surfaced during optimization.
    #[error("non-finite {what} at training step {step}")]
    NonFinite {
        /// What became non-finite.
        what: &'static str,
        /// Training step (0 outside the loop).
        step: usize,
    },
}

/// How group-relative advantages are normalized within a bi-mode group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvantageScope {
    /// One normalization over all `2g` rollouts: the two modes compete
    /// directly for advantage (the default).
    Combined,
    /// Each mode's `g` rollouts are normalized separately (ablation).
    PerMode,
}

/// Hyperparameters of the reinforcement-learning stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpoConfig {
    /// Rollouts per mode per query (`g`), so each group has `2g`.
    pub group_size: usize,
    /// Clip half-width for the surrogate ratio, in (0, 1).
    pub epsilon: f64,
    /// KL-penalty coefficient toward the frozen reference (`>= 0`).
    pub beta: f64,
    /// Stabilizer added to the advantage denominator (`> 0`).
    pub eps_std: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Adam first-moment decay.
    pub adam_beta1: f64,
    /// Adam second-moment decay.
    pub adam_beta2: f64,
    /// Adam denominator stabilizer.
    pub adam_eps: f64,
    /// Gradient steps per sampled batch.
    pub inner_epochs: usize,
    /// Queries sampled per training step.
    pub batch_queries: usize,
    /// Number of training steps.
    pub iters: usize,
    /// Advantage normalization scope.
    pub advantage_scope: AdvantageScope,
}

impl Default for BpoConfig {
    fn default() -> Self {
        BpoConfig {
            group_size: 4,
            epsilon: 0.2,
            beta: 0.01,
            eps_std: 1e-6,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            inner_epochs: 2,
            batch_queries: 32,
            iters: 200,
            advantage_scope: AdvantageScope::Combined,
        }
    }
}

impl BpoConfig {
    /// Checks every field against its documented range.
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.group_size < 1 {
            return Err(OptimError::InvalidConfig("group_size must be >= 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(OptimError::InvalidConfig("epsilon must be in (0, 1)"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(OptimError::InvalidConfig("beta must be finite and >= 0"));
        }
        if !(self.eps_std > 0.0 && self.eps_std.is_finite()) {
            return Err(OptimError::InvalidConfig("eps_std must be finite and > 0"));
        }
        self.adam().validate()?;
        if self.inner_epochs < 1 {
            return Err(OptimError::InvalidConfig("inner_epochs must be >= 1"));
        }
        if self.batch_queries < 1 {
            return Err(OptimError::InvalidConfig("batch_queries must be >= 1"));
        }
        Ok(())
    }

    /// The Adam settings embedded in this config.
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// A frozen copy of policy parameters serving as the KL anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSnapshot {
    params: PolicyParams,
    tag: String,
}

impl ReferenceSnapshot {
    /// Freezes `params` under a human-readable tag.
    pub fn new(params: PolicyParams, tag: &str) -> Self {
        ReferenceSnapshot {
            params,
            tag: String::from(tag),
        }
    }

    /// The frozen parameters.
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// The tag given at freeze time.
    pub fn tag(&self) -> &str {
        &self.tag
    }
}

fn normalize_slice(rewards: &[f64], eps_std: f64, out: &mut Vec<f64>) {
    // Identical rewards carry no learning signal; their variance is
    // mathematically zero, so short-circuit to exact zeros rather than
    // letting floating-point summation manufacture noise.
    if rewards.iter().all(|&r| r == rewards[0]) {
        out.extend(rewards.iter().map(|_| 0.0));
        return;
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    out.extend(rewards.iter().map(|&r| (r - mean) / (std + eps_std)));
}

/// Group-relative advantages: each reward minus the group mean, divided by
/// the population standard deviation plus `eps_std`.
///
/// Under [`AdvantageScope::PerMode`] the two halves of the slice (thinking
/// first, non-thinking second) are normalized independently, so the slice
/// length must be even.
pub fn group_advantages(
    rewards: &[f64],
    scope: AdvantageScope,
    eps_std: f64,
) -> Result<Vec<f64>, OptimError> {
    if rewards.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    if !(eps_std > 0.0 && eps_std.is_finite()) {
        return Err(OptimError::InvalidConfig("eps_std must be finite and > 0"));
    }
    let mut out = Vec::with_capacity(rewards.len());
    match scope {
        AdvantageScope::Combined => normalize_slice(rewards, eps_std, &mut out),
        AdvantageScope::PerMode => {
            if !rewards.len().is_multiple_of(2) {
                return Err(OptimError::InvalidConfig(
                    "per-mode scope needs an even rollout count",
                ));
            }
            let half = rewards.len() / 2;
            normalize_slice(&rewards[..half], eps_std, &mut out);
            normalize_slice(&rewards[half..], eps_std, &mut out);
        }
    }
    Ok(out)
}

/// Assigns group-relative advantages to a bi-mode group in place.
pub fn assign_bimode_advantages(
    group: &mut BimodeGroup,
    scope: AdvantageScope,
    eps_std: f64,
) -> Result<(), OptimError> {
    let advantages = group_advantages(&group.rewards(), scope, eps_std)?;
    for (r, a) in group.all_mut().zip(advantages) {
        r.advantage = a;
    }
    Ok(())
}

/// Assigns combined-scope advantages to a single-mode rollout group in place.
pub fn assign_auto_advantages(rollouts: &mut [Rollout], eps_std: f64) -> Result<(), OptimError> {
    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
    let advantages = group_advantages(&rewards, AdvantageScope::Combined, eps_std)?;
    for (r, a) in rollouts.iter_mut().zip(advantages) {
        r.advantage = a;
    }
    Ok(())
}

/// Per-token KL estimator `exp(u) - u - 1` with `u = logp_ref - logp_theta`.
///
/// Non-negative for every `u`, zero exactly when the two log-probabilities
/// agree; `expm1` keeps the difference accurate (and non-negative) when `u`
/// is tiny, where the naive `exp(u) - u - 1` cancels catastrophically.
pub fn kl_token(logp_theta: f64, logp_ref: f64) -> f64 {
    let u = logp_ref - logp_theta;
    libm::expm1(u) - u
}

/// Everything one objective evaluation reports.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveBreakdown {
    /// `surrogate - beta * kl` (the maximized quantity).
    pub total: f64,
    /// Mean over rollouts of the per-token mean clipped surrogate.
    pub surrogate: f64,
    /// Mean over rollouts of the per-token mean KL estimate.
    pub kl: f64,
    /// Fraction of tokens whose ratio was clipped on its losing side.
    pub clip_fraction: f64,
    /// Per-rollout mean importance ratios, in batch order.
    pub mean_ratios: Vec<f64>,
    /// Gradient of `total` with respect to the policy parameters.
    pub gradient: GradientVector,
}

/// Shared clipped-surrogate evaluator over a flat rollout batch.
///
/// `ref_logprobs` must hold, per rollout, the reference policy's
/// log-probabilities of the generated span (cached by the caller so inner
/// epochs do not re-score the frozen reference).
fn eval_clipped(
    theta: &PolicyParams,
    rollouts: &[&Rollout],
    ref_logprobs: &[Vec<f64>],
    epsilon: f64,
    beta: f64,
    pad: Token,
) -> Result<ObjectiveBreakdown, OptimError> {
    let k_count = rollouts.len();
    if k_count == 0 {
        return Err(OptimError::EmptyBatch);
    }
    debug_assert_eq!(k_count, ref_logprobs.len());
    let mut gradient = GradientVector::zeros(theta.dims().param_count());
    let mut surrogate = 0.0;
    let mut kl_total = 0.0;
    let mut mean_ratios = Vec::with_capacity(k_count);
    let mut active_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut weights: Vec<f64> = Vec::new();

    let lo = 1.0 - epsilon;
    let hi = 1.0 + epsilon;
    for (index, (rollout, ref_lp)) in rollouts.iter().zip(ref_logprobs).enumerate() {
        let t_count = rollout.generated_len();
        if t_count == 0 {
            return Err(OptimError::EmptyRollout { index });
        }
        if rollout.old_logprobs.len() != t_count || ref_lp.len() != t_count {
            return Err(OptimError::OldLogprobMismatch {
                index,
                expected: t_count,
                got: if rollout.old_logprobs.len() != t_count {
                    rollout.old_logprobs.len()
                } else {
                    ref_lp.len()
                },
            });
        }
        let tokens = rollout.full_tokens();
        let lp = logprob_sequence(theta, &tokens, rollout.prompt_len(), &rollout.mask_spec, pad)?;

        let advantage = rollout.advantage;
        // Divide rather than multiply by a reciprocal: at theta == pi_old
        // this makes the surrogate weight bit-identical to the plain
        // advantage-weighted log-likelihood weight A / (T * K).
        let scale = t_count as f64 * k_count as f64;
        let mut surr_k = 0.0;
        let mut kl_k = 0.0;
        let mut ratio_sum = 0.0;
        weights.clear();
        for t in 0..t_count {
            let ratio = libm::exp(lp[t] - rollout.old_logprobs[t]);
            let unclipped = ratio * advantage;
            let term = unclipped.min(ratio.clamp(lo, hi) * advantage);
            // The min picks the clipped branch (zero gradient) exactly when
            // the ratio sits outside the band on the side the advantage
            // would keep pushing it.
            let clip_active =
                (ratio > hi && advantage > 0.0) || (ratio < lo && advantage < 0.0);
            if clip_active {
                active_tokens += 1;
            }
            let u_ref = ref_lp[t] - lp[t];
            surr_k += term;
            kl_k += libm::expm1(u_ref) - u_ref;
            ratio_sum += ratio;
            let d_surr = if clip_active { 0.0 } else { unclipped };
            let d_kl_neg = beta * libm::expm1(u_ref);
            weights.push((d_surr + d_kl_neg) / scale);
        }
        let t_f = t_count as f64;
        surrogate += surr_k / t_f;
        kl_total += kl_k / t_f;
        mean_ratios.push(ratio_sum / t_f);
        total_tokens += t_count;
        accumulate_weighted_grad(
            theta,
            &tokens,
            rollout.prompt_len(),
            &rollout.mask_spec,
            &weights,
            pad,
            &mut gradient,
        )?;
    }
    let k_f = k_count as f64;
    surrogate /= k_f;
    kl_total /= k_f;
    let total = surrogate - beta * kl_total;
    if !total.is_finite() {
        return Err(OptimError::NonFinite {
            what: "objective",
            step: 0,
        });
    }
    Ok(ObjectiveBreakdown {
        total,
        surrogate,
        kl: kl_total,
        clip_fraction: active_tokens as f64 / total_tokens as f64,
        mean_ratios,
        gradient,
    })
}

fn score_reference(
    reference: &PolicyParams,
    rollouts: &[&Rollout],
    pad: Token,
) -> Result<Vec<Vec<f64>>, OptimError> {
    rollouts
        .iter()
        .map(|r| {
            logprob_sequence(reference, &r.full_tokens(), r.prompt_len(), &r.mask_spec, pad)
                .map_err(OptimError::from)
        })
        .collect()
}

/// Evaluates the bi-mode objective and its gradient over prepared groups
/// (advantages already assigned).
pub fn bpo_objective(
    theta: &PolicyParams,
    reference: &ReferenceSnapshot,
    groups: &[BimodeGroup],
    cfg: &BpoConfig,
    vocab: &Vocab,
) -> Result<ObjectiveBreakdown, OptimError> {
    cfg.validate()?;
    let flat: Vec<&Rollout> = groups.iter().flat_map(|g| g.all()).collect();
    let ref_lps = score_reference(reference.params(), &flat, vocab.pad())?;
    eval_clipped(theta, &flat, &ref_lps, cfg.epsilon, cfg.beta, vocab.pad())
}

/// Evaluates the same clipped objective over single-mode (Auto-sampled)
/// groups, as the conventional baseline does.
pub fn grpo_objective(
    theta: &PolicyParams,
    reference: &ReferenceSnapshot,
    groups: &[Vec<Rollout>],
    cfg: &BpoConfig,
    vocab: &Vocab,
) -> Result<ObjectiveBreakdown, OptimError> {
    cfg.validate()?;
    let flat: Vec<&Rollout> = groups.iter().flat_map(|g| g.iter()).collect();
    let ref_lps = score_reference(reference.params(), &flat, vocab.pad())?;
    eval_clipped(theta, &flat, &ref_lps, cfg.epsilon, cfg.beta, vocab.pad())
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    /// Learning rate (`> 0`).
    pub lr: f64,
    /// First-moment decay, in `[0, 1)`.
    pub beta1: f64,
    /// Second-moment decay, in `[0, 1)`.
    pub beta2: f64,
    /// Denominator stabilizer (`> 0`).
    pub eps: f64,
}

impl AdamConfig {
    /// Standard moment decays with a caller-chosen learning rate.
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Checks field ranges.
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::InvalidConfig("lr must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimError::InvalidConfig("adam betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(OptimError::InvalidConfig("adam eps must be finite and > 0"));
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    /// Fresh (zeroed) state for a parameter vector of length `len`.
    pub fn new(len: usize) -> Self {
        AdamState {
            m: alloc::vec![0.0; len],
            v: alloc::vec![0.0; len],
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Parameter-vector length this state serves.
    pub fn len(&self) -> usize {
        self.m.len()
    }

    /// Whether the state serves an empty parameter vector.
    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam **ascent** step: `params += lr * m_hat / (sqrt(v_hat) + eps)`,
/// with bias-corrected moments.
pub fn adam_update(
    params: &mut PolicyParams,
    grad: &GradientVector,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    cfg.validate()?;
    let n = params.flat().len();
    if grad.len() != n || state.len() != n {
        return Err(OptimError::Policy(PolicyError::ParamLength {
            expected: n,
            got: if grad.len() != n {
                grad.len()
            } else {
                state.len()
            },
        }));
    }
    if !grad.all_finite() {
        return Err(OptimError::NonFinite {
            what: "gradient",
            step: 0,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let flat = params.flat_mut();
    for (((p, &g), m), v) in flat
        .iter_mut()
        .zip(grad.as_slice())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p += cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
    if !params.all_finite() {
        return Err(OptimError::NonFinite {
            what: "parameters",
            step: 0,
        });
    }
    Ok(())
}

/// Which sampler feeds the clipped objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    /// Bi-mode groups: `g` forced-thinking plus `g` forced-non-thinking.
    Bpo,
    /// Conventional baseline: `2g` Auto-sampled rollouts.
    Grpo,
}

/// Periodic held-out probes run inside the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSettings {
    /// The probe suite.
    pub suite: EvalSuite,
    /// Probe after every `interval`-th step (and always on the last step).
    pub interval: usize,
}

/// Everything recorded about one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainStepMetrics {
    /// Step index, from 0.
    pub step: usize,
    /// Objective total at the last inner epoch (before its update).
    pub total: f64,
    /// Surrogate component.
    pub surrogate: f64,
    /// KL component.
    pub kl: f64,
    /// Clipped-token fraction.
    pub clip_fraction: f64,
    /// Mean reward over rollouts that realized thinking (`None` if none).
    pub reward_thinking: Option<f64>,
    /// Mean reward over rollouts that realized non-thinking (`None` if none).
    pub reward_nonthinking: Option<f64>,
    /// Rollouts that realized thinking.
    pub rollouts_thinking: usize,
    /// Rollouts that realized non-thinking.
    pub rollouts_nonthinking: usize,
    /// Correct (reward 1) rollouts that realized thinking.
    pub correct_thinking: usize,
    /// Correct rollouts that realized non-thinking.
    pub correct_nonthinking: usize,
    /// Bi-mode groups in this batch that violated their structural contract
    /// (always 0 for a healthy run; counted rather than assumed).
    pub structural_violations: usize,
    /// Token statistics of the training batch, stratified by difficulty.
    pub batch_tokens: TokenStats,
    /// Held-out probe results, when this step probed.
    pub probe: Option<ProbeMetrics>,
}

/// Receives per-step metrics as training progresses.
pub trait MetricsSink {
    /// Called once per training step, in order.
    fn record(&mut self, metrics: &TrainStepMetrics);
}

impl MetricsSink for Vec<TrainStepMetrics> {
    fn record(&mut self, metrics: &TrainStepMetrics) {
        self.push(metrics.clone());
    }
}

/// A sink that drops everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _metrics: &TrainStepMetrics) {}
}

enum BatchRollouts {
    Bimode(Vec<BimodeGroup>),
    Auto(Vec<Vec<Rollout>>),
}

impl BatchRollouts {
    fn flat(&self) -> Vec<&Rollout> {
        match self {
            BatchRollouts::Bimode(groups) => groups.iter().flat_map(|g| g.all()).collect(),
            BatchRollouts::Auto(groups) => groups.iter().flat_map(|g| g.iter()).collect(),
        }
    }

    fn group_sizes(&self) -> Vec<usize> {
        match self {
            BatchRollouts::Bimode(groups) => groups.iter().map(|g| g.len()).collect(),
            BatchRollouts::Auto(groups) => groups.iter().map(|g| g.len()).collect(),
        }
    }
}

/// Runs the reinforcement-learning loop and returns the trained parameters.
///
/// Per step: sample `batch_queries` tasks, draw each task's rollout group
/// from the step-frozen policy, assign group-relative advantages, then take
/// `inner_epochs` Adam ascent steps on the clipped objective (reference
/// log-probabilities are scored once per batch). The KL anchor is frozen at
/// `init` for the whole run. With `iters == 0` the loop body never runs and
/// `init` is returned unchanged.
///
/// Determinism: all randomness flows through substreams of `seed`, so equal
/// inputs yield bit-identical parameters and metrics.
#[allow(clippy::too_many_arguments)]
pub fn rl_train(
    init: &PolicyParams,
    algo: Algo,
    task_spec: &TaskSpec,
    cfg: &BpoConfig,
    gen_cfg: &GenConfig,
    probe: Option<&ProbeSettings>,
    vocab: &Vocab,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<PolicyParams, OptimError> {
    cfg.validate()?;
    gen_cfg.validate()?;
    task_spec.validate()?;
    if let Some(p) = probe {
        if p.interval < 1 {
            return Err(OptimError::InvalidConfig("probe interval must be >= 1"));
        }
    }

    let mut theta = init.clone();
    let reference = ReferenceSnapshot::new(init.clone(), "rl-init");
    let mut adam = AdamState::new(theta.dims().param_count());
    let adam_cfg = cfg.adam();
    let pad = vocab.pad();

    for step in 0..cfg.iters {
        let pi_old = theta.clone();
        let mut task_rng = rng::substream(seed, &[stream::RL_TASKS, step as u64]);
        let tasks: Vec<TaskInstance> = (0..cfg.batch_queries)
            .map(|_| sample_task(task_spec, vocab, &mut task_rng))
            .collect();

        let mut violations = 0usize;
        let batch = match algo {
            Algo::Bpo => {
                let mut groups = Vec::with_capacity(tasks.len());
                for (qi, task) in tasks.iter().enumerate() {
                    let mut roll_rng =
                        rng::substream(seed, &[stream::RL_ROLLOUTS, step as u64, qi as u64]);
                    let mut group = generate_bimode_group(
                        &pi_old,
                        task,
                        cfg.group_size,
                        gen_cfg,
                        vocab,
                        &mut roll_rng,
                    )?;
                    if group.validate(cfg.group_size, vocab).is_err() {
                        violations += 1;
                    }
                    assign_bimode_advantages(&mut group, cfg.advantage_scope, cfg.eps_std)?;
                    groups.push(group);
                }
                BatchRollouts::Bimode(groups)
            }
            Algo::Grpo => {
                let mut groups = Vec::with_capacity(tasks.len());
                for (qi, task) in tasks.iter().enumerate() {
                    let mut roll_rng =
                        rng::substream(seed, &[stream::RL_ROLLOUTS, step as u64, qi as u64]);
                    let mut group = generate_auto_group(
                        &pi_old,
                        task,
                        2 * cfg.group_size,
                        gen_cfg,
                        vocab,
                        &mut roll_rng,
                    )?;
                    assign_auto_advantages(&mut group, cfg.eps_std)?;
                    groups.push(group);
                }
                BatchRollouts::Auto(groups)
            }
        };

        let flat = batch.flat();
        let ref_lps = score_reference(reference.params(), &flat, pad)?;
        let mut last = None;
        for _ in 0..cfg.inner_epochs {
            let breakdown = eval_clipped(&theta, &flat, &ref_lps, cfg.epsilon, cfg.beta, pad)
                .map_err(|e| match e {
                    OptimError::NonFinite { what, .. } => OptimError::NonFinite { what, step },
                    other => other,
                })?;
            adam_update(&mut theta, &breakdown.gradient, &mut adam, &adam_cfg).map_err(|e| {
                match e {
                    OptimError::NonFinite { what, .. } => OptimError::NonFinite { what, step },
                    other => other,
                }
            })?;
            last = Some(breakdown);
        }
        let breakdown = last.expect("inner_epochs >= 1");

        // Per-mode tallies over the batch, by realized mode.
        let mut tally = [(0usize, 0usize, 0.0f64); 2]; // (count, correct, reward sum)
        let mut entries: Vec<(bool, &Rollout)> = Vec::with_capacity(flat.len());
        let group_sizes = batch.group_sizes();
        let mut cursor = 0usize;
        for (qi, &size) in group_sizes.iter().enumerate() {
            let easy = tasks[qi].is_easy(task_spec.easy_threshold);
            for r in &flat[cursor..cursor + size] {
                entries.push((easy, r));
                let slot = (r.realized_mode == RealizedMode::Thinking) as usize;
                tally[slot].0 += 1;
                tally[slot].1 += (r.reward == 1.0) as usize;
                tally[slot].2 += r.reward;
            }
            cursor += size;
        }
        let batch_tokens = crate::rollout::token_stats(&entries, vocab)?;
        let mode_mean = |slot: usize| -> Option<f64> {
            let (count, _, sum) = tally[slot];
            (count > 0).then(|| sum / count as f64)
        };

        let probe_metrics = match probe {
            Some(p) if step % p.interval == 0 || step + 1 == cfg.iters => Some(eval::probe(
                &theta,
                &p.suite,
                gen_cfg.max_gen_len,
                vocab,
            )?),
            _ => None,
        };

        sink.record(&TrainStepMetrics {
            step,
            total: breakdown.total,
            surrogate: breakdown.surrogate,
            kl: breakdown.kl,
            clip_fraction: breakdown.clip_fraction,
            reward_thinking: mode_mean(1),
            reward_nonthinking: mode_mean(0),
            rollouts_thinking: tally[1].0,
            rollouts_nonthinking: tally[0].0,
            correct_thinking: tally[1].1,
            correct_nonthinking: tally[0].1,
            structural_violations: violations,
            batch_tokens,
            probe: probe_metrics,
        });
    }
    Ok(theta)
}
