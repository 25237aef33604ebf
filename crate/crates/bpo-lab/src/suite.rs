//! Held-out suite construction, disjoint from the training corpus.
//!
//! The core library samples suites from a dedicated random stream, which
//! makes train/eval overlap unlikely but not impossible — the easy stratum
//! of the task space is small. The harness closes the gap by rejection:
//! every candidate task whose query string appears in the corpus is
//! redrawn, and the final suite is re-verified with an explicit set check
//! so the disjointness invariant is enforced, not assumed.

use std::collections::BTreeSet;

use bpo_core::eval::{EvalError, EvalSuite};
use bpo_core::rng;
use bpo_core::task::{sample_task_in_range, TaskSpec};
use bpo_core::vocab::Vocab;

use crate::corpus::query_string;
use crate::error::LabError;

/// Samples a stratified suite whose query strings avoid `banned`.
///
/// `stream_id` separates suite kinds (probe vs final) under one run seed.
/// Each slot redraws at most `retries` times before giving up, which only
/// happens when the corpus blankets a whole stratum of the task space.
#[allow(clippy::too_many_arguments)]
pub fn build_disjoint_suite(
    spec: &TaskSpec,
    easy_count: usize,
    hard_count: usize,
    hard_min_steps: u32,
    banned: &BTreeSet<String>,
    retries: usize,
    vocab: &Vocab,
    seed: u64,
    stream_id: u64,
) -> Result<EvalSuite, LabError> {
    if spec.min_steps > spec.easy_threshold {
        return Err(EvalError::InvalidSuite(
            "easy stratum is empty: min_steps exceeds easy_threshold",
        )
        .into());
    }
    if hard_min_steps <= spec.easy_threshold {
        return Err(EvalError::InvalidSuite("hard_min_steps must exceed easy_threshold").into());
    }
    if hard_min_steps > spec.max_steps {
        return Err(EvalError::InvalidSuite("hard_min_steps must not exceed max_steps").into());
    }
    let mut rng = rng::substream(seed, &[stream_id]);
    let mut fill = |count: usize, lo: u32, hi: u32, stratum: &'static str| {
        let mut tasks = Vec::with_capacity(count);
        for _ in 0..count {
            let mut accepted = None;
            for _ in 0..retries {
                let task = sample_task_in_range(spec, lo, hi, vocab, &mut rng);
                if !banned.contains(&query_string(&task, vocab)) {
                    accepted = Some(task);
                    break;
                }
            }
            tasks.push(accepted.ok_or(LabError::SuiteExhausted {
                stratum,
                attempts: retries,
            })?);
        }
        Ok::<_, LabError>(tasks)
    };
    let easy = fill(easy_count, spec.min_steps, spec.easy_threshold, "easy")?;
    let hard = fill(hard_count, hard_min_steps, spec.max_steps, "hard")?;
    Ok(EvalSuite { easy, hard })
}

/// The explicit disjointness check: errors on the first suite task whose
/// query string appears in the corpus set.
pub fn verify_disjoint(
    suite: &EvalSuite,
    corpus: &BTreeSet<String>,
    vocab: &Vocab,
) -> Result<(), LabError> {
    for task in suite.easy.iter().chain(suite.hard.iter()) {
        let q = query_string(task, vocab);
        if corpus.contains(&q) {
            return Err(LabError::SuiteOverlap(q));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec::default()
    }

    #[test]
    fn suite_avoids_banned_queries() {
        let vocab = Vocab::new();
        // Ban a fat slice of the easy space, then demand a sizable suite.
        let mut banned = BTreeSet::new();
        for a in 0..10u8 {
            for b in 0..10u8 {
                banned.insert(format!("{a}+{b}"));
            }
        }
        let suite =
            build_disjoint_suite(&spec(), 40, 10, 4, &banned, 1000, &vocab, 5, 7).unwrap();
        assert_eq!(suite.easy.len(), 40);
        verify_disjoint(&suite, &banned, &vocab).unwrap();
        // Everything left in the easy stratum must be multiplicative.
        assert!(suite
            .easy
            .iter()
            .all(|t| query_string(t, &vocab).contains('*')));
    }

    #[test]
    fn blanket_ban_exhausts_the_retry_budget() {
        let vocab = Vocab::new();
        let mut banned = BTreeSet::new();
        for a in 0..10u8 {
            for b in 0..10u8 {
                banned.insert(format!("{a}+{b}"));
                banned.insert(format!("{a}*{b}"));
            }
        }
        let err = build_disjoint_suite(&spec(), 1, 1, 4, &banned, 50, &vocab, 5, 7).unwrap_err();
        assert!(matches!(err, LabError::SuiteExhausted { stratum: "easy", .. }));
    }

    #[test]
    fn construction_is_deterministic_per_seed_and_stream() {
        let vocab = Vocab::new();
        let banned = BTreeSet::new();
        let a = build_disjoint_suite(&spec(), 8, 8, 4, &banned, 100, &vocab, 1, 7).unwrap();
        let b = build_disjoint_suite(&spec(), 8, 8, 4, &banned, 100, &vocab, 1, 7).unwrap();
        let c = build_disjoint_suite(&spec(), 8, 8, 4, &banned, 100, &vocab, 1, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c, "different stream ids must give different suites");
    }

    #[test]
    fn bad_bounds_are_rejected() {
        let vocab = Vocab::new();
        let banned = BTreeSet::new();
        assert!(build_disjoint_suite(&spec(), 1, 1, 1, &banned, 10, &vocab, 0, 7).is_err());
        assert!(build_disjoint_suite(&spec(), 1, 1, 9, &banned, 10, &vocab, 0, 7).is_err());
    }

    #[test]
    fn overlap_check_catches_a_leak() {
        let vocab = Vocab::new();
        let banned = BTreeSet::new();
        let suite = build_disjoint_suite(&spec(), 4, 4, 4, &banned, 10, &vocab, 2, 7).unwrap();
        let leak = query_string(&suite.easy[0], &vocab);
        let corpus: BTreeSet<String> = [leak.clone()].into();
        let err = verify_disjoint(&suite, &corpus, &vocab).unwrap_err();
        assert!(matches!(err, LabError::SuiteOverlap(q) if q == leak));
    }
}
