//! The tiny autoregressive policy and its exact manual gradients.
//!
//! Architecture: the last `window` tokens are embedded (`embed` dims each),
//! concatenated into a `window * embed` vector, passed through one
//! tanh-activated hidden layer of width `hidden`, and projected to
//! vocabulary logits. Contexts shorter than the window are left-padded with
//! the pad token, whose embedding row is an ordinary trainable parameter.
//!
//! All parameters live in one flat `f64` vector with a fixed layout
//! (embeddings, first-layer weights, first-layer bias, output weights,
//! output bias), so checkpointing, Adam, and gradient checks can treat the
//! model as a single vector. Everything is double precision and
//! single-threaded, which makes runs bit-reproducible.
//!
//! Sampling and scoring share one masked log-softmax: a banned token has
//! probability exactly zero and is excluded from the normalizer, so the
//! probability a sampler realizes is identical to the probability a scorer
//! later assigns.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::rng::{self, stream};
use crate::vocab::{Token, TokenMask};

/// Errors from policy construction, scoring, and sampling.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    /// A dimension field is zero, or the vocab dimension exceeds the token
    /// mask width.
    #[error("policy dimensions must all be >= 1 and vocab at most 32")]
    InvalidDims,
    /// A flat parameter vector has the wrong length for its dimensions.
    #[error("parameter vector length {got} does not match dims (expected {expected})")]
    ParamLength {
        /// Length implied by the dimensions.
        expected: usize,
        /// Length actually supplied.
        got: usize,
    },
    /// A context slice does not have exactly `window` tokens.
    #[error("context length {got} does not match window {expected}")]
    ContextLength {
        /// The policy window.
        expected: usize,
        /// Tokens actually supplied.
        got: usize,
    },
    /// A token id lies outside the policy's vocabulary dimension.
    #[error("token id {id} out of range for vocab dimension {vocab}")]
    TokenOutOfRange {
        /// Offending id.
        id: usize,
        /// Vocabulary dimension.
        vocab: usize,
    },
    /// A per-token weight vector does not match the generated span.
    #[error("weight vector length {got} does not match generated span {expected}")]
    WeightLength {
        /// Generated-span length.
        expected: usize,
        /// Weights actually supplied.
        got: usize,
    },
    /// `prompt_len` exceeds the sequence length.
    #[error("prompt length {prompt_len} exceeds sequence length {len}")]
    PromptTooLong {
        /// Claimed prompt length.
        prompt_len: usize,
        /// Sequence length.
        len: usize,
    },
    /// Temperature is negative, NaN, or infinite.
    #[error("temperature must be finite and >= 0")]
    InvalidTemperature,
    /// A mask bans every token, leaving nothing to sample or score.
    #[error("mask bans every token")]
    EmptyMaskSupport,
    /// A mask bans the token to be scored.
    #[error("mask bans the scored token")]
    BannedToken,
    /// A mask bans the realized token at a generated position (the stored
    /// sequence could never have been sampled under this mask).
    #[error("mask bans the realized token at generated position {pos}")]
    MaskedRealizedToken {
        /// Zero-based position within the generated span.
        pos: usize,
    },
    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Sizes of the policy network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicyDims {
    /// Vocabulary size (logit count and embedding rows).
    pub vocab: usize,
    /// Context window length in tokens.
    pub window: usize,
    /// Embedding width per token.
    pub embed: usize,
    /// Hidden-layer width.
    pub hidden: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            vocab: 22,
            window: 16,
            embed: 24,
            hidden: 64,
        }
    }
}

impl PolicyDims {
    /// Checks that every dimension is at least 1 and that the vocabulary
    /// fits in a token mask (at most 32 ids).
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab == 0 || self.window == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(PolicyError::InvalidDims);
        }
        if self.vocab > 32 {
            return Err(PolicyError::InvalidDims);
        }
        Ok(())
    }

    /// Total number of parameters in the flat layout.
    pub fn param_count(&self) -> usize {
        self.vocab * self.embed
            + self.window * self.embed * self.hidden
            + self.hidden
            + self.hidden * self.vocab
            + self.vocab
    }

    /// Offset of the embedding table (`vocab x embed`, row per token).
    pub fn embedding_offset(&self) -> usize {
        0
    }

    /// Offset of the first-layer weights (`(window*embed) x hidden`,
    /// input-major: entry `i * hidden + u` connects input `i` to unit `u`).
    pub fn w1_offset(&self) -> usize {
        self.vocab * self.embed
    }

    /// Offset of the first-layer bias (`hidden`).
    pub fn b1_offset(&self) -> usize {
        self.w1_offset() + self.window * self.embed * self.hidden
    }

    /// Offset of the output weights (`hidden x vocab`, input-major: entry
    /// `u * vocab + v` connects unit `u` to logit `v`).
    pub fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    /// Offset of the output bias (`vocab`).
    pub fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden * self.vocab
    }
}

/// Policy parameters: dimensions plus the flat coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    flat: Vec<f64>,
}

impl PolicyParams {
    /// Wraps an existing flat vector, checking its length.
    pub fn new(dims: PolicyDims, flat: Vec<f64>) -> Result<Self, PolicyError> {
        dims.validate()?;
        if flat.len() != dims.param_count() {
            return Err(PolicyError::ParamLength {
                expected: dims.param_count(),
                got: flat.len(),
            });
        }
        Ok(PolicyParams { dims, flat })
    }

    /// All-zero parameters (useful as an accumulator or in tests).
    pub fn zeros(dims: PolicyDims) -> Result<Self, PolicyError> {
        dims.validate()?;
        Ok(PolicyParams {
            flat: vec![0.0; dims.param_count()],
            dims,
        })
    }

    /// The dimensions.
    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    /// The flat coefficient vector.
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Mutable access to the flat coefficient vector (length is fixed).
    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    /// Whether every coefficient is finite.
    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|x| x.is_finite())
    }
}

/// Initialization scale: coefficients are i.i.d. uniform on `[-0.08, 0.08)`.
pub const INIT_SCALE: f64 = 0.08;

/// Freshly initialized parameters, deterministic in `seed`.
pub fn init_params(seed: u64, dims: PolicyDims) -> Result<PolicyParams, PolicyError> {
    dims.validate()?;
    let mut rng = rng::substream(seed, &[stream::INIT]);
    let flat = (0..dims.param_count())
        .map(|_| rng.gen_range(-INIT_SCALE..INIT_SCALE))
        .collect();
    PolicyParams::new(dims, flat)
}

/// A gradient (or any co-vector) over the flat parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    flat: Vec<f64>,
}

impl GradientVector {
    /// The zero vector of length `len`.
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            flat: vec![0.0; len],
        }
    }

    /// Number of coordinates.
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    /// Whether the vector is empty.
    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// The coordinates.
    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    /// Mutable coordinates.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    /// Adds `other` componentwise.
    ///
    /// # Panics
    /// Panics if the lengths differ; gradients only combine within one model.
    pub fn add_in_place(&mut self, other: &GradientVector) {
        assert_eq!(self.flat.len(), other.flat.len(), "gradient length mismatch");
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += *b;
        }
    }

    /// Scales every coordinate by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.flat {
            *a *= factor;
        }
    }

    /// Largest absolute coordinate (0 for the empty vector).
    pub fn max_abs(&self) -> f64 {
        self.flat.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Whether every coordinate is finite.
    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|x| x.is_finite())
    }
}

/// Per-position token masks for the generated span of a sequence.
///
/// Position `i` (zero-based from the first generated token) uses the stored
/// mask if present and the empty mask otherwise, so a spec only records the
/// positions it actually constrains.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSpec {
    masks: Vec<TokenMask>,
}

impl MaskSpec {
    /// No constraints anywhere.
    pub fn none() -> Self {
        MaskSpec::default()
    }

    /// Constrains only the first generated position.
    pub fn first_step(mask: TokenMask) -> Self {
        MaskSpec { masks: vec![mask] }
    }

    /// Explicit per-position masks starting at the first generated token.
    pub fn from_masks(masks: Vec<TokenMask>) -> Self {
        MaskSpec { masks }
    }

    /// The mask for generated position `pos`.
    pub fn at(&self, pos: usize) -> TokenMask {
        self.masks.get(pos).copied().unwrap_or(TokenMask::NONE)
    }

    /// Whether no position is constrained.
    pub fn is_unconstrained(&self) -> bool {
        self.masks.iter().all(|m| m.bans_nothing())
    }
}

/// Activations from one forward pass, kept for backpropagation.
struct Forward {
    /// Concatenated input embeddings, length `window * embed`.
    x: Vec<f64>,
    /// Hidden activations after tanh, length `hidden`.
    hidden: Vec<f64>,
    /// Raw logits, length `vocab`.
    logits: Vec<f64>,
}

fn forward(params: &PolicyParams, context: &[Token]) -> Result<Forward, PolicyError> {
    let d = params.dims();
    if context.len() != d.window {
        return Err(PolicyError::ContextLength {
            expected: d.window,
            got: context.len(),
        });
    }
    for &t in context {
        if t.index() >= d.vocab {
            return Err(PolicyError::TokenOutOfRange {
                id: t.index(),
                vocab: d.vocab,
            });
        }
    }
    let flat = params.flat();
    let emb = &flat[d.embedding_offset()..d.w1_offset()];
    let w1 = &flat[d.w1_offset()..d.b1_offset()];
    let b1 = &flat[d.b1_offset()..d.w2_offset()];
    let w2 = &flat[d.w2_offset()..d.b2_offset()];
    let b2 = &flat[d.b2_offset()..];

    let in_dim = d.window * d.embed;
    let mut x = Vec::with_capacity(in_dim);
    for &t in context {
        let row = &emb[t.index() * d.embed..(t.index() + 1) * d.embed];
        x.extend_from_slice(row);
    }

    let mut hidden = b1.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w1[i * d.hidden..(i + 1) * d.hidden];
        for (h, &w) in hidden.iter_mut().zip(row) {
            *h += xi * w;
        }
    }
    for h in &mut hidden {
        *h = libm::tanh(*h);
    }

    let mut logits = b2.to_vec();
    for (u, &hu) in hidden.iter().enumerate() {
        let row = &w2[u * d.vocab..(u + 1) * d.vocab];
        for (l, &w) in logits.iter_mut().zip(row) {
            *l += hu * w;
        }
    }
    Ok(Forward { x, hidden, logits })
}

/// Raw (unmasked, unnormalized) logits for a full context window.
pub fn logits(params: &PolicyParams, context: &[Token]) -> Result<Vec<f64>, PolicyError> {
    Ok(forward(params, context)?.logits)
}

/// Log-sum-exp over the mask's support, returned as `(max, log_sum)` where
/// `log p(tok) = logits[tok] - max - log_sum`.
fn support_log_norm(logits: &[f64], mask: TokenMask) -> Result<(f64, f64), PolicyError> {
    // A NaN logit would otherwise masquerade as an empty support, because
    // every comparison against it fails.
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(PolicyError::NonFinite("logits"));
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if !mask.is_banned_index(i) && l > max {
            max = l;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::EmptyMaskSupport);
    }
    let mut sum = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        if !mask.is_banned_index(i) {
            sum += libm::exp(l - max);
        }
    }
    Ok((max, libm::log(sum)))
}

/// Log-probabilities under the masked softmax; banned tokens get `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: TokenMask) -> Result<Vec<f64>, PolicyError> {
    let (max, log_sum) = support_log_norm(logits, mask)?;
    Ok(logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if mask.is_banned_index(i) {
                f64::NEG_INFINITY
            } else {
                l - max - log_sum
            }
        })
        .collect())
}

/// Log-probability of `tok` under the masked softmax of `logits`.
pub fn log_prob_of(logits: &[f64], mask: TokenMask, tok: Token) -> Result<f64, PolicyError> {
    if mask.is_banned(tok) {
        return Err(PolicyError::BannedToken);
    }
    let (max, log_sum) = support_log_norm(logits, mask)?;
    Ok(logits[tok.index()] - max - log_sum)
}

/// Probabilities under the masked softmax; banned tokens get exactly 0.
fn masked_probs(logits: &[f64], mask: TokenMask) -> Result<Vec<f64>, PolicyError> {
    let (max, log_sum) = support_log_norm(logits, mask)?;
    Ok(logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if mask.is_banned_index(i) {
                0.0
            } else {
                libm::exp(l - max - log_sum)
            }
        })
        .collect())
}

/// Samples a token from already-computed logits.
///
/// Temperature 0 is the greedy decode: the highest-logit allowed token, with
/// ties broken toward the lowest id so greedy evaluation is deterministic.
/// Positive temperatures sample from `softmax(logits / temperature)`
/// restricted to the mask's support.
pub fn sample_from_logits(
    logits: &[f64],
    temperature: f64,
    mask: TokenMask,
    rng: &mut impl Rng,
) -> Result<Token, PolicyError> {
    if !temperature.is_finite() || temperature < 0.0 {
        return Err(PolicyError::InvalidTemperature);
    }
    // NaN logits would silently win (greedy) or lose (softmax) every
    // comparison; surface them instead of sampling garbage.
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(PolicyError::NonFinite("logits"));
    }
    if temperature == 0.0 {
        let mut best: Option<(usize, f64)> = None;
        for (i, &l) in logits.iter().enumerate() {
            if mask.is_banned_index(i) {
                continue;
            }
            // Strictly-greater keeps the lowest id on ties.
            if best.is_none_or(|(_, bl)| l > bl) {
                best = Some((i, l));
            }
        }
        return best
            .map(|(i, _)| Token::from_index(i))
            .ok_or(PolicyError::EmptyMaskSupport);
    }

    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if !mask.is_banned_index(i) {
            max = max.max(l / temperature);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(PolicyError::EmptyMaskSupport);
    }
    let mut weights = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let w = if mask.is_banned_index(i) {
            0.0
        } else {
            libm::exp(l / temperature - max)
        };
        total += w;
        weights.push(w);
    }
    if !total.is_finite() || total <= 0.0 {
        return Err(PolicyError::NonFinite("sampling weights"));
    }
    let target = rng.gen::<f64>() * total;
    let mut cumulative = 0.0;
    let mut last_allowed = None;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        cumulative += w;
        last_allowed = Some(i);
        if target < cumulative {
            return Ok(Token::from_index(i));
        }
    }
    // Rounding can leave target == total; fall back to the last allowed id.
    last_allowed
        .map(Token::from_index)
        .ok_or(PolicyError::EmptyMaskSupport)
}

/// One forward pass plus a sample: the next token for `context`.
pub fn sample_next(
    params: &PolicyParams,
    context: &[Token],
    temperature: f64,
    mask: TokenMask,
    rng: &mut impl Rng,
) -> Result<Token, PolicyError> {
    let l = logits(params, context)?;
    sample_from_logits(&l, temperature, mask, rng)
}

/// Writes the window ending just before position `upto` of `tokens` into
/// `buf`, left-padding with `pad` when fewer than `window` tokens precede it.
fn fill_context(buf: &mut Vec<Token>, tokens: &[Token], upto: usize, window: usize, pad: Token) {
    buf.clear();
    let start = upto.saturating_sub(window);
    for _ in 0..window - (upto - start) {
        buf.push(pad);
    }
    buf.extend_from_slice(&tokens[start..upto]);
}

/// The context window used to predict position `upto` of `tokens`.
pub fn context_window(tokens: &[Token], upto: usize, window: usize, pad: Token) -> Vec<Token> {
    let mut buf = Vec::with_capacity(window);
    fill_context(&mut buf, tokens, upto, window, pad);
    buf
}

/// Log-probability of every generated token of `tokens` (positions
/// `prompt_len..`) under the masked softmax, one entry per position.
///
/// `mask_spec` is indexed from the first generated position. A mask that
/// bans the realized token is an error: such a sequence could never have
/// been sampled under the mask, so scoring it would silently disagree with
/// the sampler.
pub fn logprob_sequence(
    params: &PolicyParams,
    tokens: &[Token],
    prompt_len: usize,
    mask_spec: &MaskSpec,
    pad: Token,
) -> Result<Vec<f64>, PolicyError> {
    if prompt_len > tokens.len() {
        return Err(PolicyError::PromptTooLong {
            prompt_len,
            len: tokens.len(),
        });
    }
    let window = params.dims().window;
    let mut ctx = Vec::with_capacity(window);
    let mut out = Vec::with_capacity(tokens.len() - prompt_len);
    for pos in prompt_len..tokens.len() {
        let gen_pos = pos - prompt_len;
        let mask = mask_spec.at(gen_pos);
        let realized = tokens[pos];
        if mask.is_banned(realized) {
            return Err(PolicyError::MaskedRealizedToken { pos: gen_pos });
        }
        fill_context(&mut ctx, tokens, pos, window, pad);
        let l = logits(params, &ctx)?;
        out.push(log_prob_of(&l, mask, realized)?);
    }
    Ok(out)
}

/// Accumulates `sum_t weights[t] * d/dθ log π_θ(tokens[prompt_len + t] | ctx)`
/// into `grad`.
///
/// This is the single backpropagation primitive of the crate: policy
/// gradients, KL gradients, and cross-entropy gradients all reduce to a
/// per-token weight vector fed through it. Positions with weight exactly 0.0
/// are skipped, which is exact. Masked softmax gradients flow only through
/// allowed logits; banned logits receive no gradient because the normalizer
/// never saw them.
pub fn accumulate_weighted_grad(
    params: &PolicyParams,
    tokens: &[Token],
    prompt_len: usize,
    mask_spec: &MaskSpec,
    weights: &[f64],
    pad: Token,
    grad: &mut GradientVector,
) -> Result<(), PolicyError> {
    if prompt_len > tokens.len() {
        return Err(PolicyError::PromptTooLong {
            prompt_len,
            len: tokens.len(),
        });
    }
    let span = tokens.len() - prompt_len;
    if weights.len() != span {
        return Err(PolicyError::WeightLength {
            expected: span,
            got: weights.len(),
        });
    }
    let d = params.dims();
    if grad.len() != d.param_count() {
        return Err(PolicyError::ParamLength {
            expected: d.param_count(),
            got: grad.len(),
        });
    }
    let window = d.window;
    let mut ctx: Vec<Token> = Vec::with_capacity(window);
    let mut dlogits = vec![0.0; d.vocab];
    let mut dpre = vec![0.0; d.hidden];

    for pos in prompt_len..tokens.len() {
        let gen_pos = pos - prompt_len;
        let mask = mask_spec.at(gen_pos);
        let realized = tokens[pos];
        if mask.is_banned(realized) {
            return Err(PolicyError::MaskedRealizedToken { pos: gen_pos });
        }
        let w = weights[gen_pos];
        if !w.is_finite() {
            return Err(PolicyError::NonFinite("token weight"));
        }
        if w == 0.0 {
            continue;
        }
        fill_context(&mut ctx, tokens, pos, window, pad);
        let fwd = forward(params, &ctx)?;
        let probs = masked_probs(&fwd.logits, mask)?;

        // d/dlogit_v of log softmax(realized) = 1{v = realized} - p_v on the
        // support, 0 off it: banned logits have p_v = 0 and never match the
        // (allowed) realized id, so they receive no gradient.
        for (v, dl) in dlogits.iter_mut().enumerate() {
            let indicator = if v == realized.index() { 1.0 } else { 0.0 };
            *dl = w * (indicator - probs[v]);
        }

        let flat = params.flat();
        let w1 = &flat[d.w1_offset()..d.b1_offset()];
        let w2 = &flat[d.w2_offset()..d.b2_offset()];
        let gflat = grad.as_mut_slice();

        // Output bias and weights; also push into hidden.
        for u in 0..d.hidden {
            let hu = fwd.hidden[u];
            let row = &w2[u * d.vocab..(u + 1) * d.vocab];
            let grow = u * d.vocab;
            let mut dh = 0.0;
            for v in 0..d.vocab {
                let g = dlogits[v];
                if g != 0.0 {
                    gflat[d.w2_offset() + grow + v] += hu * g;
                    dh += row[v] * g;
                }
            }
            dpre[u] = dh * (1.0 - hu * hu);
        }
        for v in 0..d.vocab {
            gflat[d.b2_offset() + v] += dlogits[v];
        }

        // First-layer bias and weights; also push into the input embedding.
        for u in 0..d.hidden {
            gflat[d.b1_offset() + u] += dpre[u];
        }
        for (i, &xi) in fwd.x.iter().enumerate() {
            let grow = d.w1_offset() + i * d.hidden;
            if xi != 0.0 {
                for u in 0..d.hidden {
                    gflat[grow + u] += xi * dpre[u];
                }
            }
        }
        // dx_i = sum_u w1[i][u] * dpre_u, scattered into embedding rows.
        for (slot, &tok) in ctx.iter().enumerate() {
            let erow = d.embedding_offset() + tok.index() * d.embed;
            for j in 0..d.embed {
                let i = slot * d.embed + j;
                let wrow = &w1[i * d.hidden..(i + 1) * d.hidden];
                let mut dx = 0.0;
                for u in 0..d.hidden {
                    dx += wrow[u] * dpre[u];
                }
                gflat[erow + j] += dx;
            }
        }
    }
    Ok(())
}

/// Convenience wrapper: a fresh gradient from [`accumulate_weighted_grad`].
pub fn weighted_grad(
    params: &PolicyParams,
    tokens: &[Token],
    prompt_len: usize,
    mask_spec: &MaskSpec,
    weights: &[f64],
    pad: Token,
) -> Result<GradientVector, PolicyError> {
    let mut grad = GradientVector::zeros(params.dims().param_count());
    accumulate_weighted_grad(params, tokens, prompt_len, mask_spec, weights, pad, &mut grad)?;
    Ok(grad)
}

/// Compares `analytic` against central finite differences of `objective`.
///
/// Up to `sample_coords` coordinates are checked (all of them when the
/// parameter vector is smaller); the return value is the largest relative
/// error `|a - n| / max(|a|, |n|, 1e-8)` over the checked coordinates.
pub fn finite_difference_check(
    params: &PolicyParams,
    analytic: &GradientVector,
    mut objective: impl FnMut(&PolicyParams) -> f64,
    fd_step: f64,
    sample_coords: usize,
    rng: &mut impl Rng,
) -> Result<f64, PolicyError> {
    let n = params.dims().param_count();
    if analytic.len() != n {
        return Err(PolicyError::ParamLength {
            expected: n,
            got: analytic.len(),
        });
    }
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(PolicyError::NonFinite("fd step"));
    }
    // Sample distinct coordinates via a partial Fisher-Yates shuffle.
    let mut indices: Vec<usize> = (0..n).collect();
    let take = sample_coords.min(n).max(1);
    for k in 0..take {
        let j = rng.gen_range(k..n);
        indices.swap(k, j);
    }

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &i in &indices[..take] {
        let original = probe.flat()[i];
        probe.flat_mut()[i] = original + fd_step;
        let plus = objective(&probe);
        probe.flat_mut()[i] = original - fd_step;
        let minus = objective(&probe);
        probe.flat_mut()[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(PolicyError::NonFinite("objective"));
        }
        let numeric = (plus - minus) / (2.0 * fd_step);
        let a = analytic.as_slice()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::vocab::Vocab;

    fn small_dims() -> PolicyDims {
        // Vocabulary stays 22 (token ids must be in range); shrink the rest.
        PolicyDims {
            vocab: 22,
            window: 4,
            embed: 3,
            hidden: 5,
        }
    }

    #[test]
    fn default_param_count_matches_closed_form() {
        let d = PolicyDims::default();
        // 22*24 + 16*24*64 + 64 + 64*22 + 22
        assert_eq!(d.param_count(), 26_598);
        assert_eq!(d.b2_offset() + d.vocab, d.param_count());
    }

    #[test]
    fn init_is_bounded_and_seed_deterministic() {
        let d = small_dims();
        let a = init_params(9, d).unwrap();
        let b = init_params(9, d).unwrap();
        let c = init_params(10, d).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), c.flat());
        assert!(a.flat().iter().all(|&x| (-INIT_SCALE..INIT_SCALE).contains(&x)));
        // Not all identical (sanity that the stream advances).
        assert!(a.flat().windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn dims_and_param_length_are_validated() {
        let d = small_dims();
        assert_eq!(
            PolicyParams::new(d, alloc::vec![0.0; 3]),
            Err(PolicyError::ParamLength {
                expected: d.param_count(),
                got: 3
            })
        );
        let bad = PolicyDims { vocab: 0, ..d };
        assert_eq!(bad.validate(), Err(PolicyError::InvalidDims));
    }

    #[test]
    fn logits_requires_full_window() {
        let v = Vocab::new();
        let p = init_params(1, small_dims()).unwrap();
        let short = [v.digit(1); 3];
        assert!(matches!(
            logits(&p, &short),
            Err(PolicyError::ContextLength { expected: 4, got: 3 })
        ));
        let ok = [v.digit(1), v.plus(), v.digit(2), v.sep()];
        let l = logits(&p, &ok).unwrap();
        assert_eq!(l.len(), 22);
        assert!(l.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn masked_log_softmax_normalizes_over_support() {
        let v = Vocab::new();
        let p = init_params(2, small_dims()).unwrap();
        let ctx = [v.digit(1), v.plus(), v.digit(2), v.sep()];
        let l = logits(&p, &ctx).unwrap();

        let lp = masked_log_softmax(&l, TokenMask::NONE).unwrap();
        let total: f64 = lp.iter().map(|&x| libm::exp(x)).sum();
        assert!((total - 1.0).abs() < 1e-12);

        let mask = TokenMask::banning(&[v.think_close(), v.eos()]);
        let lp = masked_log_softmax(&l, mask).unwrap();
        assert_eq!(lp[v.think_close().index()], f64::NEG_INFINITY);
        assert_eq!(lp[v.eos().index()], f64::NEG_INFINITY);
        let total: f64 = lp
            .iter()
            .filter(|x| x.is_finite())
            .map(|&x| libm::exp(x))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_allowed_token_has_log_prob_zero() {
        let v = Vocab::new();
        let mut mask = TokenMask::NONE;
        for t in v.tokens() {
            if t != v.eos() {
                mask.ban(t);
            }
        }
        let l: Vec<f64> = (0..22).map(|i| i as f64).collect();
        assert_eq!(log_prob_of(&l, mask, v.eos()).unwrap(), 0.0);
        assert_eq!(
            log_prob_of(&l, mask, v.bos()),
            Err(PolicyError::BannedToken)
        );
    }

    #[test]
    fn empty_support_is_an_error() {
        let v = Vocab::new();
        let mut mask = TokenMask::NONE;
        for t in v.tokens() {
            mask.ban(t);
        }
        let l = alloc::vec![0.0; 22];
        assert_eq!(
            masked_log_softmax(&l, mask),
            Err(PolicyError::EmptyMaskSupport)
        );
        let mut r = rng::substream(0, &[1]);
        assert_eq!(
            sample_from_logits(&l, 1.0, mask, &mut r),
            Err(PolicyError::EmptyMaskSupport)
        );
        assert_eq!(
            sample_from_logits(&l, 0.0, mask, &mut r),
            Err(PolicyError::EmptyMaskSupport)
        );
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let v = Vocab::new();
        let mut l = alloc::vec![0.0; 22];
        l[4] = 3.5;
        l[9] = 3.5; // tie with id 4
        let mut r = rng::substream(0, &[2]);
        let tok = sample_from_logits(&l, 0.0, TokenMask::NONE, &mut r).unwrap();
        assert_eq!(tok, v.digit(4));

        // Masking the winner hands the tie to the other.
        let mask = TokenMask::banning(&[v.digit(4)]);
        let tok = sample_from_logits(&l, 0.0, mask, &mut r).unwrap();
        assert_eq!(tok, v.digit(9));
    }

    #[test]
    fn sampling_never_returns_banned_tokens() {
        let v = Vocab::new();
        let p = init_params(3, small_dims()).unwrap();
        let ctx = [v.digit(7), v.times(), v.digit(7), v.sep()];
        let l = logits(&p, &ctx).unwrap();
        let mask = TokenMask::banning(&[v.think_close(), v.pad(), v.bos()]);
        let mut r = rng::substream(3, &[4]);
        for _ in 0..2000 {
            let tok = sample_from_logits(&l, 1.0, mask, &mut r).unwrap();
            assert!(!mask.is_banned(tok));
        }
    }

    #[test]
    fn sampling_frequencies_track_probabilities() {
        let v = Vocab::new();
        let p = init_params(4, small_dims()).unwrap();
        let ctx = [v.digit(1), v.plus(), v.digit(1), v.sep()];
        let l = logits(&p, &ctx).unwrap();
        let lp = masked_log_softmax(&l, TokenMask::NONE).unwrap();
        let mut counts = [0usize; 22];
        let mut r = rng::substream(4, &[5]);
        let n = 40_000;
        for _ in 0..n {
            counts[sample_from_logits(&l, 1.0, TokenMask::NONE, &mut r)
                .unwrap()
                .index()] += 1;
        }
        for t in v.tokens() {
            let p_true = libm::exp(lp[t.index()]);
            let p_hat = counts[t.index()] as f64 / n as f64;
            // 4-sigma binomial tolerance.
            let sigma = (p_true * (1.0 - p_true) / n as f64).sqrt();
            assert!(
                (p_hat - p_true).abs() <= 4.0 * sigma + 1e-4,
                "token {t}: want {p_true:.4}, got {p_hat:.4}"
            );
        }
    }

    #[test]
    fn negative_or_nan_temperature_is_rejected() {
        let l = alloc::vec![0.0; 22];
        let mut r = rng::substream(0, &[6]);
        assert_eq!(
            sample_from_logits(&l, -1.0, TokenMask::NONE, &mut r),
            Err(PolicyError::InvalidTemperature)
        );
        assert_eq!(
            sample_from_logits(&l, f64::NAN, TokenMask::NONE, &mut r),
            Err(PolicyError::InvalidTemperature)
        );
    }

    #[test]
    fn context_window_left_pads_short_prefixes() {
        let v = Vocab::new();
        let toks = [v.digit(1), v.digit(2), v.digit(3)];
        let w = context_window(&toks, 2, 4, v.pad());
        assert_eq!(w, alloc::vec![v.pad(), v.pad(), v.digit(1), v.digit(2)]);
        let w = context_window(&toks, 0, 2, v.pad());
        assert_eq!(w, alloc::vec![v.pad(), v.pad()]);
        let w = context_window(&toks, 3, 2, v.pad());
        assert_eq!(w, alloc::vec![v.digit(2), v.digit(3)]);
    }

    #[test]
    fn logprob_sequence_matches_per_position_scoring() {
        let v = Vocab::new();
        let p = init_params(5, small_dims()).unwrap();
        let toks = alloc::vec![
            v.bos(),
            v.digit(2),
            v.plus(),
            v.digit(3),
            v.sep(),
            v.think_open(),
            v.digit(5),
            v.think_close(),
            v.digit(5),
            v.eos(),
        ];
        let prompt_len = 6;
        let spec = MaskSpec::first_step(TokenMask::banning(&[v.think_close()]));
        let lps = logprob_sequence(&p, &toks, prompt_len, &spec, v.pad()).unwrap();
        assert_eq!(lps.len(), toks.len() - prompt_len);
        for (i, &lp) in lps.iter().enumerate() {
            let pos = prompt_len + i;
            let ctx = context_window(&toks, pos, p.dims().window, v.pad());
            let l = logits(&p, &ctx).unwrap();
            let expect = log_prob_of(&l, spec.at(i), toks[pos]).unwrap();
            assert_eq!(lp, expect);
            assert!(lp <= 0.0);
        }
    }

    #[test]
    fn logprob_sequence_rejects_masked_realized_tokens() {
        let v = Vocab::new();
        let p = init_params(5, small_dims()).unwrap();
        let toks = alloc::vec![v.sep(), v.think_close(), v.eos()];
        let spec = MaskSpec::first_step(TokenMask::banning(&[v.think_close()]));
        assert_eq!(
            logprob_sequence(&p, &toks, 1, &spec, v.pad()),
            Err(PolicyError::MaskedRealizedToken { pos: 0 })
        );
    }

    #[test]
    fn zero_weights_yield_zero_gradient() {
        let v = Vocab::new();
        let p = init_params(6, small_dims()).unwrap();
        let toks = alloc::vec![v.bos(), v.digit(1), v.sep(), v.digit(1), v.eos()];
        let g = weighted_grad(&p, &toks, 3, &MaskSpec::none(), &[0.0, 0.0], v.pad()).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn weight_length_must_match_generated_span() {
        let v = Vocab::new();
        let p = init_params(6, small_dims()).unwrap();
        let toks = alloc::vec![v.bos(), v.digit(1), v.sep(), v.digit(1), v.eos()];
        assert_eq!(
            weighted_grad(&p, &toks, 3, &MaskSpec::none(), &[1.0], v.pad()),
            Err(PolicyError::WeightLength {
                expected: 2,
                got: 1
            })
        );
    }

    #[test]
    fn weighted_grad_passes_finite_difference_check() {
        let v = Vocab::new();
        let p = init_params(7, small_dims()).unwrap();
        let toks = alloc::vec![
            v.bos(),
            v.digit(4),
            v.times(),
            v.digit(6),
            v.sep(),
            v.think_open(),
            v.digit(4),
            v.digit(2),
            v.think_close(),
            v.digit(4),
            v.eos(),
        ];
        let prompt_len = 6;
        let spec = MaskSpec::first_step(TokenMask::banning(&[v.think_close()]));
        let weights = alloc::vec![0.7, -1.3, 0.0, 2.0, 0.4];
        let grad = weighted_grad(&p, &toks, prompt_len, &spec, &weights, v.pad()).unwrap();
        assert!(grad.all_finite());

        let spec2 = spec.clone();
        let toks2 = toks.clone();
        let w2 = weights.clone();
        let objective = move |q: &PolicyParams| {
            let lps = logprob_sequence(q, &toks2, prompt_len, &spec2, v.pad()).unwrap();
            lps.iter().zip(&w2).map(|(lp, w)| lp * w).sum()
        };
        let mut r = rng::substream(7, &[rng::stream::FD_COORDS]);
        let worst = finite_difference_check(&p, &grad, objective, 1e-5, 400, &mut r).unwrap();
        assert!(worst < 1e-6, "fd mismatch: {worst}");
    }

    #[test]
    fn finite_difference_checker_flags_wrong_gradients() {
        let v = Vocab::new();
        let p = init_params(8, small_dims()).unwrap();
        let toks = alloc::vec![v.bos(), v.digit(1), v.sep(), v.digit(1), v.eos()];
        let weights = alloc::vec![1.0, 1.0];
        let mut grad = weighted_grad(&p, &toks, 3, &MaskSpec::none(), &weights, v.pad()).unwrap();
        // Corrupt one coordinate badly.
        grad.as_mut_slice()[0] += 1.0;
        let objective = move |q: &PolicyParams| {
            logprob_sequence(q, &toks, 3, &MaskSpec::none(), v.pad())
                .unwrap()
                .iter()
                .sum()
        };
        let mut r = rng::substream(8, &[rng::stream::FD_COORDS]);
        // Check all coordinates so the corrupted one is definitely visited.
        let worst =
            finite_difference_check(&p, &grad, objective, 1e-5, p.dims().param_count(), &mut r)
                .unwrap();
        assert!(worst > 1e-2, "corruption not detected: {worst}");
    }

    #[test]
    fn gradient_vector_algebra() {
        let mut a = GradientVector::zeros(3);
        a.as_mut_slice().copy_from_slice(&[1.0, -2.0, 0.5]);
        let mut b = GradientVector::zeros(3);
        b.as_mut_slice().copy_from_slice(&[0.5, 2.0, 0.5]);
        a.add_in_place(&b);
        assert_eq!(a.as_slice(), &[1.5, 0.0, 1.0]);
        a.scale(2.0);
        assert_eq!(a.as_slice(), &[3.0, 0.0, 2.0]);
        assert_eq!(a.max_abs(), 3.0);
        assert!(a.all_finite());
    }
}
