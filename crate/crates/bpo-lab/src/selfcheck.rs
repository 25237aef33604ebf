//! Self-contained correctness checks behind the `check` subcommand.
//!
//! Every check rebuilds its expectation independently of the code under
//! test — central finite differences for gradients, closed forms and hand
//! values for the estimators, a from-scratch log-likelihood accumulation
//! for the sampling-identity oracle — and reports one pass/fail line with
//! the measured number. The same functions back the acceptance tests, which
//! run them at full sample sizes.

use std::slice;
use std::time::Instant;

use bpo_core::anneal::{build_item, sft_loss, CurationItem, ModeLabel, SourceHeuristic};
use bpo_core::checkpoint;
use bpo_core::optim::{
    bpo_objective, grpo_objective, group_advantages, kl_token, AdvantageScope, BpoConfig,
    ReferenceSnapshot,
};
use bpo_core::policy::{
    accumulate_weighted_grad, finite_difference_check, init_params, logprob_sequence,
    GradientVector, MaskSpec, PolicyDims, PolicyParams,
};
use bpo_core::rng;
use bpo_core::rollout::{generate_bimode_group, generate_rollout, GenConfig, Mode, Rollout};
use bpo_core::task::{sample_task, TaskSpec};
use bpo_core::vocab::{Vocab, VOCAB_SIZE};
use rand::Rng;

use crate::error::LabError;

/// One check's verdict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckOutcome {
    /// Stable check name.
    pub name: &'static str,
    /// Whether the measured value met the bound.
    pub passed: bool,
    /// The measured value and its bound, human-readable.
    pub detail: String,
}

impl CheckOutcome {
    /// The CLI line for this outcome.
    pub fn line(&self) -> String {
        format!(
            "{}: {} ({})",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Sample sizes and tolerances. Defaults are the full published bounds;
/// they run in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckSettings {
    /// Seed for every check's private random streams.
    pub seed: u64,
    /// Coordinates sampled per gradient check.
    pub fd_coords: usize,
    /// Central-difference step.
    pub fd_step: f64,
    /// Max relative error accepted for gradient checks.
    pub fd_tolerance: f64,
    /// Random reward vectors for the advantage check.
    pub advantage_vectors: usize,
    /// Random input pairs for the KL-estimator check.
    pub kl_samples: usize,
    /// Micro-batches for the sampling-identity check.
    pub identity_batches: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            seed: 0,
            fd_coords: 220,
            fd_step: 1e-5,
            fd_tolerance: 1e-4,
            advantage_vectors: 1000,
            kl_samples: 10_000,
            identity_batches: 20,
        }
    }
}

/// Small dimensions shared by the gradient checks: big enough to exercise
/// every parameter block, small enough that finite differences stay cheap.
fn check_dims() -> PolicyDims {
    PolicyDims {
        vocab: VOCAB_SIZE,
        window: 12,
        embed: 6,
        hidden: 12,
    }
}

fn guard(name: &'static str, f: impl FnOnce() -> Result<CheckOutcome, LabError>) -> CheckOutcome {
    f().unwrap_or_else(|e| CheckOutcome {
        name,
        passed: false,
        detail: format!("errored: {e}"),
    })
}

fn fd_outcome(name: &'static str, max_rel_err: f64, s: &CheckSettings) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: max_rel_err <= s.fd_tolerance,
        detail: format!(
            "max rel err {max_rel_err:.2e} over {} coords, bound {:.0e}",
            s.fd_coords, s.fd_tolerance
        ),
    }
}

/// Gradient of a weighted log-probability sum over a sampled response,
/// first-step mode mask included, against central finite differences.
pub fn check_weighted_logprob_gradient(s: &CheckSettings) -> CheckOutcome {
    guard("weighted-logprob-gradient", || {
        let vocab = Vocab::new();
        let params = init_params(s.seed.wrapping_add(1), check_dims())?;
        let mut rng = rng::substream(s.seed, &[101]);
        let task = sample_task(&TaskSpec::default(), &vocab, &mut rng);
        let gen_cfg = GenConfig {
            temperature: 1.0,
            max_gen_len: 16,
        };
        let rollout = generate_rollout(&params, &task, Mode::Thinking, &gen_cfg, &vocab, &mut rng)?;
        let tokens = rollout.full_tokens();
        let weights: Vec<f64> = (0..rollout.generated_len())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let mut analytic = GradientVector::zeros(params.dims().param_count());
        accumulate_weighted_grad(
            &params,
            &tokens,
            rollout.prompt_len(),
            &rollout.mask_spec,
            &weights,
            vocab.pad(),
            &mut analytic,
        )?;
        let objective = |p: &PolicyParams| {
            let lps = logprob_sequence(p, &tokens, rollout.prompt_len(), &rollout.mask_spec, vocab.pad())
                .expect("objective evaluation");
            lps.iter().zip(&weights).map(|(lp, w)| lp * w).sum()
        };
        let err = finite_difference_check(&params, &analytic, objective, s.fd_step, s.fd_coords, &mut rng)?;
        Ok(fd_outcome("weighted-logprob-gradient", err, s))
    })
}

/// Gradient of the supervised mean log-likelihood (the negated
/// cross-entropy loss) over a mixed-label corpus.
pub fn check_supervised_gradient(s: &CheckSettings) -> CheckOutcome {
    guard("supervised-loss-gradient", || {
        let vocab = Vocab::new();
        let params = init_params(s.seed.wrapping_add(2), check_dims())?;
        let mut rng = rng::substream(s.seed, &[102]);
        let spec = TaskSpec::default();
        let items: Vec<CurationItem> = (0..6)
            .map(|i| {
                let task = sample_task(&spec, &vocab, &mut rng);
                let label = if i % 2 == 0 {
                    ModeLabel::Reasoning
                } else {
                    ModeLabel::Direct
                };
                build_item(&task, label, SourceHeuristic::Difficulty, &vocab)
            })
            .collect();

        // Recreate the supervised sequences: <bos> query <sep> target.
        let seqs: Vec<(Vec<_>, usize)> = items
            .iter()
            .map(|item| {
                let mut seq = vec![vocab.bos()];
                seq.extend_from_slice(&item.task.query);
                seq.push(vocab.sep());
                let prompt_len = seq.len();
                seq.extend_from_slice(&item.target);
                (seq, prompt_len)
            })
            .collect();
        let total_tokens: usize = seqs.iter().map(|(seq, p)| seq.len() - p).sum();
        let mut analytic = GradientVector::zeros(params.dims().param_count());
        let none = MaskSpec::none();
        for (seq, prompt_len) in &seqs {
            let weights = vec![1.0 / total_tokens as f64; seq.len() - prompt_len];
            accumulate_weighted_grad(&params, seq, *prompt_len, &none, &weights, vocab.pad(), &mut analytic)?;
        }
        let objective =
            |p: &PolicyParams| -sft_loss(p, &items, &vocab).expect("objective evaluation");
        let err = finite_difference_check(&params, &analytic, objective, s.fd_step, s.fd_coords, &mut rng)?;
        Ok(fd_outcome("supervised-loss-gradient", err, s))
    })
}

/// Gradient of the mean per-token KL penalty toward a frozen reference.
pub fn check_kl_gradient(s: &CheckSettings) -> CheckOutcome {
    guard("kl-penalty-gradient", || {
        let vocab = Vocab::new();
        let params = init_params(s.seed.wrapping_add(3), check_dims())?;
        let reference = init_params(s.seed.wrapping_add(4), check_dims())?;
        let mut rng = rng::substream(s.seed, &[103]);
        let task = sample_task(&TaskSpec::default(), &vocab, &mut rng);
        let gen_cfg = GenConfig {
            temperature: 1.0,
            max_gen_len: 16,
        };
        let rollout = generate_rollout(&params, &task, Mode::Auto, &gen_cfg, &vocab, &mut rng)?;
        let tokens = rollout.full_tokens();
        let ref_lps = logprob_sequence(
            &reference,
            &tokens,
            rollout.prompt_len(),
            &rollout.mask_spec,
            vocab.pad(),
        )?;

        // d/d lp_theta of (expm1(u) - u) with u = lp_ref - lp_theta is
        // -expm1(u): the per-token weights of the analytic gradient.
        let theta_lps = logprob_sequence(
            &params,
            &tokens,
            rollout.prompt_len(),
            &rollout.mask_spec,
            vocab.pad(),
        )?;
        let t = theta_lps.len() as f64;
        let weights: Vec<f64> = theta_lps
            .iter()
            .zip(&ref_lps)
            .map(|(lp, lpr)| -f64::exp_m1(lpr - lp) / t)
            .collect();
        let mut analytic = GradientVector::zeros(params.dims().param_count());
        accumulate_weighted_grad(
            &params,
            &tokens,
            rollout.prompt_len(),
            &rollout.mask_spec,
            &weights,
            vocab.pad(),
            &mut analytic,
        )?;
        let objective = |p: &PolicyParams| {
            let lps = logprob_sequence(p, &tokens, rollout.prompt_len(), &rollout.mask_spec, vocab.pad())
                .expect("objective evaluation");
            lps.iter()
                .zip(&ref_lps)
                .map(|(lp, lpr)| kl_token(*lp, *lpr))
                .sum::<f64>()
                / t
        };
        let err = finite_difference_check(&params, &analytic, objective, s.fd_step, s.fd_coords, &mut rng)?;
        Ok(fd_outcome("kl-penalty-gradient", err, s))
    })
}

/// Gradient of the full clipped-and-penalized objective on a one-group,
/// two-per-mode micro-batch, evaluated away from the sampling policy so
/// ratios, clipping, and the KL term all engage.
pub fn check_surrogate_gradient(s: &CheckSettings) -> CheckOutcome {
    guard("surrogate-gradient", || {
        let vocab = Vocab::new();
        let sampler = init_params(s.seed.wrapping_add(5), check_dims())?;
        let theta = init_params(s.seed.wrapping_add(6), check_dims())?;
        let reference = ReferenceSnapshot::new(init_params(s.seed.wrapping_add(7), check_dims())?, "check");
        let mut rng = rng::substream(s.seed, &[104]);
        let task = sample_task(&TaskSpec::default(), &vocab, &mut rng);
        let gen_cfg = GenConfig {
            temperature: 1.0,
            max_gen_len: 16,
        };
        let mut group = generate_bimode_group(&sampler, &task, 2, &gen_cfg, &vocab, &mut rng)?;
        // Hand-set advantages so the gradient is non-trivial even when all
        // four rewards tie.
        for (r, a) in group.all_mut().zip([1.0, -0.5, 0.3, -0.8]) {
            r.advantage = a;
        }
        let cfg = BpoConfig {
            beta: 0.05,
            ..BpoConfig::default()
        };
        let analytic = bpo_objective(&theta, &reference, slice::from_ref(&group), &cfg, &vocab)?;
        let objective = |p: &PolicyParams| {
            bpo_objective(p, &reference, slice::from_ref(&group), &cfg, &vocab)
                .expect("objective evaluation")
                .total
        };
        let err = finite_difference_check(
            &theta,
            &analytic.gradient,
            objective,
            s.fd_step,
            s.fd_coords,
            &mut rng,
        )?;
        Ok(fd_outcome("surrogate-gradient", err, s))
    })
}

/// Group-relative advantages: zero mean, unit standard deviation up to the
/// stabilizer, exact zeros for tied rewards, and the worked example.
pub fn check_advantages(s: &CheckSettings) -> CheckOutcome {
    guard("advantage-normalization", || {
        let mut rng = rng::substream(s.seed, &[105]);
        let mut max_abs_mean: f64 = 0.0;
        let mut min_std = f64::INFINITY;
        let mut max_std: f64 = 0.0;
        let mut tied = 0usize;
        for i in 0..s.advantage_vectors {
            let n = 2 + (i % 15);
            let rewards: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let adv = group_advantages(&rewards, AdvantageScope::Combined, 1e-6)?;
            if rewards.iter().all(|&r| r == rewards[0]) {
                tied += 1;
                if adv.iter().any(|&a| a != 0.0) {
                    return Ok(CheckOutcome {
                        name: "advantage-normalization",
                        passed: false,
                        detail: format!("tied rewards {rewards:?} gave nonzero advantages"),
                    });
                }
                continue;
            }
            let nf = n as f64;
            let mean = adv.iter().sum::<f64>() / nf;
            let std = (adv.iter().map(|a| a * a).sum::<f64>() / nf).sqrt();
            max_abs_mean = max_abs_mean.max(mean.abs());
            min_std = min_std.min(std);
            max_std = max_std.max(std);
        }
        // Worked example, with a stabilizer small enough not to show at the
        // stated tolerance.
        let hand = group_advantages(&[1.0, 1.0, 0.0, 0.0], AdvantageScope::Combined, 1e-9)?;
        let hand_err = hand
            .iter()
            .zip([1.0, 1.0, -1.0, -1.0])
            .map(|(a, e)| (a - e).abs())
            .fold(0.0f64, f64::max);
        let passed = max_abs_mean <= 1e-9
            && min_std >= 1.0 - 1e-5
            && max_std <= 1.0
            && hand_err <= 1e-6;
        Ok(CheckOutcome {
            name: "advantage-normalization",
            passed,
            detail: format!(
                "{} vectors ({} tied): |mean| <= {max_abs_mean:.1e}, std in [{min_std:.8}, {max_std:.8}], hand err {hand_err:.1e}",
                s.advantage_vectors, tied
            ),
        })
    })
}

/// At the sampling policy, the surrogate gradient must equal the
/// advantage-weighted log-likelihood gradient computed from scratch.
pub fn check_sampling_identity(s: &CheckSettings) -> CheckOutcome {
    guard("sampling-identity", || {
        let vocab = Vocab::new();
        let gen_cfg = GenConfig {
            temperature: 1.0,
            max_gen_len: 16,
        };
        let cfg = BpoConfig::default();
        let mut max_rel: f64 = 0.0;
        for b in 0..s.identity_batches {
            let theta = init_params(s.seed.wrapping_add(500 + b as u64), check_dims())?;
            let mut rng = rng::substream(s.seed, &[106, b as u64]);
            let task = sample_task(&TaskSpec::default(), &vocab, &mut rng);
            let mut group = generate_bimode_group(&theta, &task, 2, &gen_cfg, &vocab, &mut rng)?;
            for (r, a) in group.all_mut().zip([1.0, -0.5, 0.3, -0.8]) {
                r.advantage = a;
            }
            let reference = ReferenceSnapshot::new(theta.clone(), "check");
            let surrogate =
                bpo_objective(&theta, &reference, slice::from_ref(&group), &cfg, &vocab)?;

            let flat: Vec<&Rollout> = group.all().collect();
            let k = flat.len() as f64;
            let mut oracle = GradientVector::zeros(theta.dims().param_count());
            for r in &flat {
                let w = r.advantage / (r.generated_len() as f64 * k);
                let weights = vec![w; r.generated_len()];
                accumulate_weighted_grad(
                    &theta,
                    &r.full_tokens(),
                    r.prompt_len(),
                    &r.mask_spec,
                    &weights,
                    vocab.pad(),
                    &mut oracle,
                )?;
            }
            let scale = oracle
                .as_slice()
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
                .max(1e-300);
            let rel = surrogate
                .gradient
                .as_slice()
                .iter()
                .zip(oracle.as_slice())
                .map(|(a, o)| (a - o).abs())
                .fold(0.0f64, f64::max)
                / scale;
            max_rel = max_rel.max(rel);
        }
        Ok(CheckOutcome {
            name: "sampling-identity",
            passed: max_rel <= 1e-10,
            detail: format!(
                "max rel diff {max_rel:.2e} over {} micro-batches, bound 1e-10",
                s.identity_batches
            ),
        })
    })
}

/// Clipping kills the gradient exactly when the ratio sits outside the band
/// on the advantage's favorable side, and only then.
pub fn check_clip_quadrants(s: &CheckSettings) -> CheckOutcome {
    guard("clip-quadrants", || {
        let vocab = Vocab::new();
        let theta = init_params(s.seed.wrapping_add(8), check_dims())?;
        let mut rng = rng::substream(s.seed, &[107]);
        let task = sample_task(&TaskSpec::default(), &vocab, &mut rng);
        let gen_cfg = GenConfig {
            temperature: 1.0,
            max_gen_len: 16,
        };
        let base = generate_rollout(&theta, &task, Mode::Auto, &gen_cfg, &vocab, &mut rng)?;
        let reference = ReferenceSnapshot::new(theta.clone(), "check");
        let cfg = BpoConfig {
            beta: 0.0,
            ..BpoConfig::default()
        };
        let mut lines = Vec::new();
        let mut all_ok = true;
        for (ratio, advantage, expect_clipped) in [
            (1.5, 1.0, true),
            (1.5, -1.0, false),
            (0.5, -1.0, true),
            (0.5, 1.0, false),
        ] {
            // Shifting the stored sampling-time log-probabilities sets the
            // ratio of every generated token exactly.
            let mut probe = base.clone();
            let shift = f64::ln(ratio);
            probe.old_logprobs = probe.old_logprobs.iter().map(|lp| lp - shift).collect();
            probe.advantage = advantage;
            let b = grpo_objective(&theta, &reference, &[vec![probe]], &cfg, &vocab)?;
            let grad_zero = b.gradient.as_slice().iter().all(|&g| g == 0.0);
            let ok = if expect_clipped {
                grad_zero && b.clip_fraction == 1.0
            } else {
                !grad_zero && b.clip_fraction == 0.0
            };
            all_ok &= ok;
            lines.push(format!(
                "r={ratio} A={advantage:+}: clip {:.0}%, grad {}",
                b.clip_fraction * 100.0,
                if grad_zero { "zero" } else { "nonzero" }
            ));
        }
        Ok(CheckOutcome {
            name: "clip-quadrants",
            passed: all_ok,
            detail: lines.join("; "),
        })
    })
}

/// The per-token KL estimator: non-negative everywhere, zero exactly at
/// agreement, and the worked value at a log-ratio of ln 2.
pub fn check_kl_estimator(s: &CheckSettings) -> CheckOutcome {
    guard("kl-estimator", || {
        let mut rng = rng::substream(s.seed, &[108]);
        let mut min_kl = f64::INFINITY;
        let mut zero_violations = 0usize;
        for _ in 0..s.kl_samples {
            let a = -20.0 * rng.gen::<f64>();
            let b = -20.0 * rng.gen::<f64>();
            let k = kl_token(a, b);
            min_kl = min_kl.min(k);
            if (a == b) != (k == 0.0) {
                zero_violations += 1;
            }
        }
        for x in [0.0, -0.5, -5.25, -19.0] {
            if kl_token(x, x) != 0.0 {
                zero_violations += 1;
            }
        }
        let hand = kl_token(-1.0, -1.0 + std::f64::consts::LN_2);
        let hand_err = (hand - 0.30685).abs();
        let passed = min_kl >= 0.0 && zero_violations == 0 && hand_err <= 1e-5;
        Ok(CheckOutcome {
            name: "kl-estimator",
            passed,
            detail: format!(
                "{} samples: min {min_kl:.2e}, zero-iff-equal violations {zero_violations}, ln2 value {hand:.6} (err {hand_err:.1e})",
                s.kl_samples
            ),
        })
    })
}

/// Checkpoint bytes decode to the exact parameters that were encoded, and
/// corrupted bytes are rejected.
pub fn check_checkpoint_roundtrip(s: &CheckSettings) -> CheckOutcome {
    guard("checkpoint-roundtrip", || {
        let params = init_params(s.seed.wrapping_add(9), PolicyDims::default())?;
        let bytes = checkpoint::encode(&params);
        let back = checkpoint::decode(&bytes)?;
        let exact = back == params;
        let mut corrupt = bytes.clone();
        corrupt[0] ^= 0xFF;
        let rejects_magic = checkpoint::decode(&corrupt).is_err();
        let rejects_truncation = checkpoint::decode(&bytes[..bytes.len() - 3]).is_err();
        Ok(CheckOutcome {
            name: "checkpoint-roundtrip",
            passed: exact && rejects_magic && rejects_truncation,
            detail: format!(
                "{} bytes, exact {exact}, rejects corruption {rejects_magic}/{rejects_truncation}",
                bytes.len()
            ),
        })
    })
}

/// Runs every check in a stable order.
pub fn run_all(s: &CheckSettings) -> Vec<CheckOutcome> {
    vec![
        check_weighted_logprob_gradient(s),
        check_supervised_gradient(s),
        check_kl_gradient(s),
        check_surrogate_gradient(s),
        check_advantages(s),
        check_sampling_identity(s),
        check_clip_quadrants(s),
        check_kl_estimator(s),
        check_checkpoint_roundtrip(s),
    ]
}

/// Runs every check and reports the elapsed wall-clock alongside.
pub fn run_all_timed(s: &CheckSettings) -> (Vec<CheckOutcome>, f64) {
    let start = Instant::now();
    let outcomes = run_all(s);
    (outcomes, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> CheckSettings {
        CheckSettings {
            fd_coords: 40,
            advantage_vectors: 100,
            kl_samples: 500,
            identity_batches: 3,
            ..CheckSettings::default()
        }
    }

    #[test]
    fn every_check_passes_at_reduced_sizes() {
        for outcome in run_all(&quick()) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }

    #[test]
    fn outcome_lines_are_single_lines() {
        for outcome in run_all(&quick()) {
            assert_eq!(outcome.line().lines().count(), 1);
        }
    }
}
