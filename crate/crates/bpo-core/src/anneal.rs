//! Bi-mode corpus curation and the supervised warm-up that precedes
//! reinforcement learning.
//!
//! A freshly initialized policy speaks neither response format. This module
//! makes it bi-capable in two stages:
//!
//! 1. **Curation** labels every pooled task [`ModeLabel::Reasoning`] or
//!    [`ModeLabel::Direct`] through exactly one of two heuristics, keyed by
//!    the task's kind: objective tasks are performance-mined (sample `N`
//!    attempts and label `Reasoning` when all of them fail), subjective tasks
//!    go through a procedural difficulty rule (step count above a threshold).
//!    Labeled tasks become supervised targets — the teacher trace inside the
//!    think span for `Reasoning` items, an empty span for `Direct` ones —
//!    and then pass a filter that drops inconsistent, keyword-polluted, and
//!    duplicate items.
//! 2. **Supervised warm-up** ([`sft_train`]) minimizes the mean cross-entropy
//!    of the kept targets (prompt positions loss-masked) with mini-batch
//!    Adam, mixing both label kinds in one stage rather than training them
//!    in sequence.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::optim::{adam_update, AdamConfig, AdamState, OptimError};
use crate::policy::{
    accumulate_weighted_grad, logprob_sequence, GradientVector, MaskSpec, PolicyError,
    PolicyParams,
};
use crate::rng::{self, stream};
use crate::rollout::{generate_rollout, GenConfig, Mode, RolloutError};
use crate::task::{teacher_trace, TaskInstance, TaskKind, TaskSpec};
use crate::vocab::{Token, Vocab};

/// Errors from curation and supervised training.
#[derive(Debug, PartialEq, thiserror::Error)]
pub enum AnnealError {
    /// A config field violates its documented range.
    #[error("invalid curation/sft config: {0}")]
    InvalidConfig(&'static str),
    /// A policy operation failed.
    #[error("policy error: {0}")]
    Policy(#[from] PolicyError),
    /// Mining rollouts failed.
    #[error("rollout error: {0}")]
    Rollout(#[from] RolloutError),
    /// The optimizer rejected an update.
    #[error("optimizer error: {0}")]
    Optim(#[from] OptimError),
    /// Supervised training was asked to run on an empty corpus.
    #[error("supervised training needs a non-empty corpus")]
    EmptyCorpus,
    /// The supervised loss left the finite range.
    #[error("non-finite supervised loss in epoch {epoch}")]
    NonFiniteLoss {
        /// Zero-based epoch in which the loss diverged.
        epoch: usize,
    },
}

/// Which response format a curated task is supervised toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeLabel {
    /// Target carries the teacher trace inside the think span.
    Reasoning,
    /// Target closes the think span immediately.
    Direct,
}

/// Which heuristic produced a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceHeuristic {
    /// Performance mining over sampled attempts (objective tasks).
    Performance,
    /// Step-count difficulty rule (subjective tasks).
    Difficulty,
}

/// How many of the `N` mined attempts must be correct before an objective
/// task is labeled [`ModeLabel::Direct`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectRule {
    /// At least one correct attempt (the weakest reading, the default).
    AnyCorrect,
    /// Every attempt correct.
    AllCorrect,
}

/// Curation hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurationConfig {
    /// Mined attempts per objective query (`N >= 1`).
    pub samples_per_query: usize,
    /// Sampling temperature for mining rollouts (finite, `>= 0`).
    pub mining_temperature: f64,
    /// Generation budget per mining rollout (`>= 2`).
    pub mining_gen_len: usize,
    /// When mining counts an objective task as answerable directly.
    pub direct_rule: DirectRule,
    /// Subjective tasks with more steps than this are labeled `Reasoning`.
    pub difficulty_threshold: u32,
    /// Whether the filter drops repeated tasks (first occurrence kept).
    pub dedup: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            samples_per_query: 8,
            mining_temperature: 1.0,
            mining_gen_len: 24,
            direct_rule: DirectRule::AnyCorrect,
            difficulty_threshold: 1,
            dedup: true,
        }
    }
}

impl CurationConfig {
    /// Checks the fields that do not depend on a task spec.
    pub fn validate(&self) -> Result<(), AnnealError> {
        if self.samples_per_query < 1 {
            return Err(AnnealError::InvalidConfig(
                "samples_per_query must be >= 1",
            ));
        }
        if !self.mining_temperature.is_finite() || self.mining_temperature < 0.0 {
            return Err(AnnealError::InvalidConfig(
                "mining_temperature must be finite and >= 0",
            ));
        }
        if self.mining_gen_len < 2 {
            return Err(AnnealError::InvalidConfig("mining_gen_len must be >= 2"));
        }
        Ok(())
    }

    /// Full validation against the task spec the pool was drawn from: the
    /// difficulty threshold must lie inside the spec's step range, so the
    /// subjective rule can actually split the pool.
    pub fn validate_for(&self, spec: &TaskSpec) -> Result<(), AnnealError> {
        self.validate()?;
        if !(spec.min_steps..=spec.max_steps).contains(&self.difficulty_threshold) {
            return Err(AnnealError::InvalidConfig(
                "difficulty_threshold must lie within the task spec's step range",
            ));
        }
        Ok(())
    }
}

/// One curated training item: a task, its label, and the full supervised
/// target for the response region.
#[derive(Clone, Debug, PartialEq)]
pub struct CurationItem {
    /// The task the target answers.
    pub task: TaskInstance,
    /// Which response format the target realizes.
    pub label: ModeLabel,
    /// Supervised target: the whole response region, from `<think>` through
    /// `<eos>`.
    pub target: Vec<Token>,
    /// Which heuristic labeled the task.
    pub source: SourceHeuristic,
}

/// Applies `rule` to a mined correct-count: zero correct always labels
/// `Reasoning`; otherwise `AnyCorrect` labels `Direct`, while `AllCorrect`
/// demands a perfect score.
pub fn label_from_counts(correct: usize, total: usize, rule: DirectRule) -> ModeLabel {
    if correct == 0 {
        return ModeLabel::Reasoning;
    }
    match rule {
        DirectRule::AnyCorrect => ModeLabel::Direct,
        DirectRule::AllCorrect => {
            if correct == total {
                ModeLabel::Direct
            } else {
                ModeLabel::Reasoning
            }
        }
    }
}

/// Labels an objective task by performance mining: draw
/// `cfg.samples_per_query` auto-mode rollouts from `miner` at the mining
/// temperature and apply [`label_from_counts`] to the number that earned
/// reward 1.
///
/// The caller is expected to have validated `cfg` and to pass an objective
/// task; the subjective branch is [`classify_subjective`].
pub fn classify_objective(
    task: &TaskInstance,
    miner: &PolicyParams,
    cfg: &CurationConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<ModeLabel, AnnealError> {
    debug_assert_eq!(task.kind, TaskKind::Objective);
    let gen_cfg = GenConfig {
        temperature: cfg.mining_temperature,
        max_gen_len: cfg.mining_gen_len,
    };
    let mut correct = 0usize;
    for _ in 0..cfg.samples_per_query {
        let r = generate_rollout(miner, task, Mode::Auto, &gen_cfg, vocab, rng)?;
        if r.reward == 1.0 {
            correct += 1;
        }
    }
    Ok(label_from_counts(correct, cfg.samples_per_query, cfg.direct_rule))
}

/// Labels a subjective task by the procedural difficulty rule: more steps
/// than the threshold means `Reasoning`.
pub fn classify_subjective(task: &TaskInstance, cfg: &CurationConfig) -> ModeLabel {
    debug_assert_eq!(task.kind, TaskKind::Subjective);
    if task.steps > cfg.difficulty_threshold {
        ModeLabel::Reasoning
    } else {
        ModeLabel::Direct
    }
}

/// Routes a task through exactly one heuristic, decided by its kind, and
/// reports which path labeled it.
pub fn classify_task(
    task: &TaskInstance,
    miner: &PolicyParams,
    cfg: &CurationConfig,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> Result<(ModeLabel, SourceHeuristic), AnnealError> {
    match task.kind {
        TaskKind::Objective => Ok((
            classify_objective(task, miner, cfg, vocab, rng)?,
            SourceHeuristic::Performance,
        )),
        TaskKind::Subjective => Ok((classify_subjective(task, cfg), SourceHeuristic::Difficulty)),
    }
}

/// Formats the supervised target for a labeled task.
///
/// Both labels share the structurally uniform tag pair, so the trained
/// policy always opens and closes a think span:
///
/// - `Reasoning`: `<think> trace… </think> answer <eos>`, where the trace is
///   the teacher's running partial results;
/// - `Direct`: `<think> </think> answer <eos>` with an empty span.
pub fn build_item(
    task: &TaskInstance,
    label: ModeLabel,
    source: SourceHeuristic,
    vocab: &Vocab,
) -> CurationItem {
    let trace = match label {
        ModeLabel::Reasoning => teacher_trace(task, vocab),
        ModeLabel::Direct => Vec::new(),
    };
    let mut target = Vec::with_capacity(trace.len() + 4);
    target.push(vocab.think_open());
    target.extend_from_slice(&trace);
    target.push(vocab.think_close());
    target.push(task.answer);
    target.push(vocab.eos());
    CurationItem {
        task: task.clone(),
        label,
        target,
        source,
    }
}

/// Per-reason rejection counts from [`filter_items`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RejectionReport {
    /// Items whose embedded answer disagreed with the task oracle (or whose
    /// target did not even parse as a response).
    pub consistency: usize,
    /// Items whose think span contained a forbidden token.
    pub keyword: usize,
    /// Items repeating an already-kept task (dedup enabled).
    pub duplicate: usize,
}

impl RejectionReport {
    /// Total rejected items.
    pub fn total(&self) -> usize {
        self.consistency + self.keyword + self.duplicate
    }
}

/// Splits `target` as `<think> body… </think> answer <eos>` and returns
/// `(body, answer)`. Structural failure returns `None`; the body itself is
/// unconstrained here (the keyword check owns that).
fn split_target<'a>(target: &'a [Token], vocab: &Vocab) -> Option<(&'a [Token], Token)> {
    if target.first() != Some(&vocab.think_open()) {
        return None;
    }
    let body_len = target[1..]
        .iter()
        .position(|&t| t == vocab.think_close())?;
    let close_at = 1 + body_len;
    if target.len() != close_at + 3 {
        return None;
    }
    let answer = target[close_at + 1];
    vocab.digit_value(answer)?;
    if target[close_at + 2] != vocab.eos() {
        return None;
    }
    Some((&target[1..close_at], answer))
}

/// Screens curated items before training, in three ordered checks per item —
/// each rejection is counted under the first check it fails:
///
/// 1. consistency: the embedded answer must equal the task's oracle answer
///    (targets that do not parse at all are also counted here);
/// 2. keyword: the think body must be free of framing and mode tokens
///    (`<eos>`, `<sep>`, `<bos>`, `<pad>`, `<think>`);
/// 3. duplicate: with `dedup`, only the first item per task query survives.
pub fn filter_items(
    items: Vec<CurationItem>,
    dedup: bool,
    vocab: &Vocab,
) -> (Vec<CurationItem>, RejectionReport) {
    let forbidden = [
        vocab.eos(),
        vocab.sep(),
        vocab.bos(),
        vocab.pad(),
        vocab.think_open(),
    ];
    let mut report = RejectionReport::default();
    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::new();
    let mut kept = Vec::with_capacity(items.len());
    for item in items {
        let Some((body, answer)) = split_target(&item.target, vocab) else {
            report.consistency += 1;
            continue;
        };
        if answer != item.task.answer {
            report.consistency += 1;
            continue;
        }
        if body.iter().any(|t| forbidden.contains(t)) {
            report.keyword += 1;
            continue;
        }
        if dedup {
            let key: Vec<u8> = item.task.query.iter().map(|t| t.id()).collect();
            if !seen.insert(key) {
                report.duplicate += 1;
                continue;
            }
        }
        kept.push(item);
    }
    (kept, report)
}

/// Runs the whole curation stage over a task pool: label each task through
/// its heuristic (each with its own mining substream, so pool order and pool
/// size do not perturb individual labels), format targets, and filter.
pub fn curate_corpus(
    pool: &[TaskInstance],
    miner: &PolicyParams,
    cfg: &CurationConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<(Vec<CurationItem>, RejectionReport), AnnealError> {
    cfg.validate()?;
    let mut items = Vec::with_capacity(pool.len());
    for (i, task) in pool.iter().enumerate() {
        let mut rng = rng::substream(seed, &[stream::MINING, i as u64]);
        let (label, source) = classify_task(task, miner, cfg, vocab, &mut rng)?;
        items.push(build_item(task, label, source, vocab));
    }
    Ok(filter_items(items, cfg.dedup, vocab))
}

/// Supervised warm-up hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftConfig {
    /// Passes over the corpus (0 performs no update).
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Items per mini-batch (`>= 1`).
    pub batch_size: usize,
    /// Seed of the epoch-shuffle substreams.
    pub shuffle_seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 60,
            lr: 3e-3,
            batch_size: 16,
            shuffle_seed: 0,
        }
    }
}

impl SftConfig {
    /// Checks field ranges.
    pub fn validate(&self) -> Result<(), AnnealError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AnnealError::InvalidConfig("lr must be finite and > 0"));
        }
        if self.batch_size < 1 {
            return Err(AnnealError::InvalidConfig("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// What [`sft_train`] hands back.
#[derive(Clone, Debug, PartialEq)]
pub struct SftOutcome {
    /// The trained parameters.
    pub params: PolicyParams,
    /// Mean per-token cross-entropy of each epoch, measured batch-by-batch
    /// before that batch's update.
    pub epoch_losses: Vec<f64>,
    /// True when the corpus carried only one of the two labels — the policy
    /// cannot become bi-capable from such a corpus, so the caller should
    /// surface this loudly.
    pub single_label: bool,
}

/// The supervised prompt for an item: `<bos> query <sep>`, with no mode
/// prefix — the target itself opens the think span, which is exactly what
/// lets an auto-mode prompt's next token decide the realized mode later.
fn item_prompt(task: &TaskInstance, vocab: &Vocab) -> Vec<Token> {
    let mut prompt = Vec::with_capacity(task.query.len() + 2);
    prompt.push(vocab.bos());
    prompt.extend_from_slice(&task.query);
    prompt.push(vocab.sep());
    prompt
}

/// Mean per-token cross-entropy of the corpus targets under `params`,
/// prompts excluded, without touching the parameters.
pub fn sft_loss(
    params: &PolicyParams,
    items: &[CurationItem],
    vocab: &Vocab,
) -> Result<f64, AnnealError> {
    if items.is_empty() {
        return Err(AnnealError::EmptyCorpus);
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for item in items {
        let mut seq = item_prompt(&item.task, vocab);
        let prompt_len = seq.len();
        seq.extend_from_slice(&item.target);
        let lps = logprob_sequence(params, &seq, prompt_len, &MaskSpec::none(), vocab.pad())?;
        nll -= lps.iter().sum::<f64>();
        tokens += lps.len();
    }
    if tokens == 0 {
        return Err(AnnealError::EmptyCorpus);
    }
    Ok(nll / tokens as f64)
}

/// Trains `init` on the curated corpus by mini-batch Adam on the mean
/// cross-entropy of target tokens (prompt positions carry no loss), both
/// labels mixed in one stage.
///
/// Epoch order is reshuffled from a fresh substream per epoch, so the
/// procedure is deterministic in `(init, items, cfg)`. A non-finite loss
/// aborts with the epoch number rather than training through garbage.
pub fn sft_train(
    init: &PolicyParams,
    items: &[CurationItem],
    cfg: &SftConfig,
    vocab: &Vocab,
) -> Result<SftOutcome, AnnealError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(AnnealError::EmptyCorpus);
    }
    let has_reasoning = items.iter().any(|i| i.label == ModeLabel::Reasoning);
    let has_direct = items.iter().any(|i| i.label == ModeLabel::Direct);
    let single_label = !(has_reasoning && has_direct);

    // Pre-assemble the training sequences once.
    let seqs: Vec<(Vec<Token>, usize)> = items
        .iter()
        .map(|item| {
            let mut seq = item_prompt(&item.task, vocab);
            let prompt_len = seq.len();
            seq.extend_from_slice(&item.target);
            (seq, prompt_len)
        })
        .collect();

    let mut params = init.clone();
    let n = params.dims().param_count();
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new(n);
    let none = MaskSpec::none();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::substream(cfg.shuffle_seed, &[stream::SFT, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let batch_tokens: usize = batch
                .iter()
                .map(|&i| seqs[i].0.len() - seqs[i].1)
                .sum();
            let mut grad = GradientVector::zeros(n);
            let mut batch_nll = 0.0;
            for &i in batch {
                let (seq, prompt_len) = &seqs[i];
                let lps = logprob_sequence(&params, seq, *prompt_len, &none, vocab.pad())?;
                batch_nll -= lps.iter().sum::<f64>();
                // Ascending the mean log-likelihood descends the mean
                // cross-entropy.
                let w = 1.0 / batch_tokens as f64;
                let weights = alloc::vec![w; lps.len()];
                accumulate_weighted_grad(
                    &params,
                    seq,
                    *prompt_len,
                    &none,
                    &weights,
                    vocab.pad(),
                    &mut grad,
                )?;
            }
            if !(batch_nll / batch_tokens as f64).is_finite() {
                return Err(AnnealError::NonFiniteLoss { epoch });
            }
            adam_update(&mut params, &grad, &mut adam, &adam_cfg)?;
            epoch_nll += batch_nll;
            epoch_tokens += batch_tokens;
        }
        let epoch_loss = epoch_nll / epoch_tokens as f64;
        if !epoch_loss.is_finite() {
            return Err(AnnealError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(epoch_loss);
    }

    Ok(SftOutcome {
        params,
        epoch_losses,
        single_label,
    })
}
