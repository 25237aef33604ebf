//! Modular-arithmetic task environment.
//!
//! A task is a left-to-right chain `d0 op1 d1 op2 d2 …` over single digits
//! with operators `+` and `*`, evaluated strictly left to right modulo the
//! task modulus (no precedence). The number of operators is the task's
//! *step count*; tasks with `steps <= easy_threshold` form the easy stratum.
//! Each task also carries a *kind* label: objective tasks are curated by
//! mining actual rollouts, subjective tasks by a difficulty heuristic.
//!
//! The reward oracle is binary: a response earns 1.0 exactly when it is
//! well-formed (`<think> body… </think> digit <eos>`) *and* the digit equals
//! the task answer; everything else — malformed structure, truncation,
//! wrong digit — earns 0.0.

use alloc::vec::Vec;
use rand::Rng;

use crate::vocab::{Token, Vocab};

/// Errors from task construction and evaluation.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    /// A task-spec field violates its documented range.
    #[error("invalid task spec: {0}")]
    InvalidSpec(&'static str),
    /// A query is not of the form `digit (op digit)*`.
    #[error("malformed query expression")]
    MalformedQuery,
}

/// Whether a task is curated by rollout mining or by a difficulty heuristic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Curated by mining: label depends on measured solve rate.
    Objective,
    /// Curated heuristically: label depends on the step count alone.
    Subjective,
}

/// Parameters of the task distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    /// Minimum number of operators (inclusive, `>= 1`).
    pub min_steps: u32,
    /// Maximum number of operators (inclusive, `>= min_steps`).
    pub max_steps: u32,
    /// Tasks with `steps <= easy_threshold` count as easy.
    pub easy_threshold: u32,
    /// All arithmetic is performed modulo this base (`2..=10`).
    pub modulus: u32,
    /// Probability that a sampled task is [`TaskKind::Subjective`].
    pub subjective_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            min_steps: 1,
            max_steps: 6,
            easy_threshold: 1,
            modulus: 10,
            subjective_fraction: 0.75,
        }
    }
}

impl TaskSpec {
    /// Checks every field against its documented range.
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.min_steps < 1 {
            return Err(TaskError::InvalidSpec("min_steps must be >= 1"));
        }
        if self.max_steps < self.min_steps {
            return Err(TaskError::InvalidSpec("max_steps must be >= min_steps"));
        }
        if self.easy_threshold < 1 {
            return Err(TaskError::InvalidSpec("easy_threshold must be >= 1"));
        }
        if !(2..=10).contains(&self.modulus) {
            return Err(TaskError::InvalidSpec("modulus must be in 2..=10"));
        }
        if !(0.0..=1.0).contains(&self.subjective_fraction)
            || !self.subjective_fraction.is_finite()
        {
            return Err(TaskError::InvalidSpec(
                "subjective_fraction must be in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// One sampled task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    /// The expression tokens, `digit (op digit)*`, without framing specials.
    pub query: Vec<Token>,
    /// The single-digit answer token.
    pub answer: Token,
    /// Number of operators in the query.
    pub steps: u32,
    /// Curation-path label.
    pub kind: TaskKind,
    /// Modulus the expression is evaluated under.
    pub modulus: u32,
}

impl TaskInstance {
    /// Whether this task falls in the easy stratum of `spec`.
    pub fn is_easy(&self, easy_threshold: u32) -> bool {
        self.steps <= easy_threshold
    }
}

/// Samples one task from `spec` with the step count uniform on
/// `[min_steps, max_steps]`.
pub fn sample_task(spec: &TaskSpec, vocab: &Vocab, rng: &mut impl Rng) -> TaskInstance {
    sample_task_in_range(spec, spec.min_steps, spec.max_steps, vocab, rng)
}

/// Samples one task with the step count uniform on `[lo, hi]`.
///
/// Used to build stratified evaluation suites; `lo..=hi` need not lie inside
/// the spec's own range, but must satisfy `1 <= lo <= hi`.
pub fn sample_task_in_range(
    spec: &TaskSpec,
    lo: u32,
    hi: u32,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> TaskInstance {
    assert!(
        (1..=hi).contains(&lo),
        "step range must satisfy 1 <= lo <= hi"
    );
    let steps = rng.gen_range(lo..=hi);
    let m = spec.modulus as u8;
    let mut query = Vec::with_capacity(2 * steps as usize + 1);
    query.push(vocab.digit(rng.gen_range(0..m)));
    for _ in 0..steps {
        let op = if rng.gen_range(0..2u8) == 0 {
            vocab.plus()
        } else {
            vocab.times()
        };
        query.push(op);
        query.push(vocab.digit(rng.gen_range(0..m)));
    }
    let kind = if rng.gen_bool(spec.subjective_fraction) {
        TaskKind::Subjective
    } else {
        TaskKind::Objective
    };
    let answer = vocab.digit(
        *trace_query(&query, spec.modulus, vocab)
            .expect("generated query is well-formed")
            .last()
            .expect("steps >= 1 yields a non-empty trace"),
    );
    TaskInstance {
        query,
        answer,
        steps,
        kind,
        modulus: spec.modulus,
    }
}

/// Evaluates `query` left to right modulo `modulus`, returning the running
/// partial result after each operator. The trace length equals the number of
/// operators.
pub fn trace_query(query: &[Token], modulus: u32, vocab: &Vocab) -> Result<Vec<u8>, TaskError> {
    let mut toks = query.iter();
    let first = toks.next().ok_or(TaskError::MalformedQuery)?;
    // Reduce immediately so every intermediate value lives in [0, modulus),
    // even for digits the task generator itself would never emit.
    let mut acc =
        vocab.digit_value(*first).ok_or(TaskError::MalformedQuery)? as u32 % modulus;
    let mut trace = Vec::new();
    loop {
        let Some(&op) = toks.next() else {
            return Ok(trace);
        };
        let &operand = toks.next().ok_or(TaskError::MalformedQuery)?;
        let d = vocab
            .digit_value(operand)
            .ok_or(TaskError::MalformedQuery)? as u32;
        acc = if op == vocab.plus() {
            (acc + d) % modulus
        } else if op == vocab.times() {
            (acc * d) % modulus
        } else {
            return Err(TaskError::MalformedQuery);
        };
        trace.push(acc as u8);
    }
}

/// Evaluates `query` to its final single-digit value.
pub fn evaluate_query(query: &[Token], modulus: u32, vocab: &Vocab) -> Result<u8, TaskError> {
    let trace = trace_query(query, modulus, vocab)?;
    match trace.last() {
        Some(&v) => Ok(v),
        // A bare digit with no operators evaluates to itself, reduced.
        None => vocab
            .digit_value(query[0])
            .map(|d| (d as u32 % modulus) as u8)
            .ok_or(TaskError::MalformedQuery),
    }
}

/// The procedural teacher: the running partial results of the query as digit
/// tokens, used as the reasoning span of curated training targets. Its
/// length always equals the task's step count, so harder tasks get longer
/// traces.
pub fn teacher_trace(task: &TaskInstance, vocab: &Vocab) -> Vec<Token> {
    trace_query(&task.query, task.modulus, vocab)
        .expect("stored task queries are well-formed")
        .into_iter()
        .map(|d| vocab.digit(d))
        .collect()
}

/// Outcome of grading one response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardSignal {
    /// Binary reward: 1.0 iff `format_ok && answer_ok`.
    pub value: f64,
    /// Whether the response matches the grammar
    /// `<think> body… </think> digit <eos>` with a body free of specials.
    pub format_ok: bool,
    /// Whether the answer digit equals the task answer (false when the
    /// format already fails).
    pub answer_ok: bool,
}

/// Grades `response` (mode prefix plus generated tokens) against `task`.
///
/// The grammar places no constraint on the *content* of the reasoning span
/// beyond excluding special tokens: a response is free to reason badly and
/// still be graded only on its final digit. Truncated responses (no `<eos>`)
/// always fail the format check.
pub fn verify_answer(task: &TaskInstance, response: &[Token], vocab: &Vocab) -> RewardSignal {
    let fail = |answer_ok| RewardSignal {
        value: 0.0,
        format_ok: false,
        answer_ok,
    };
    if response.len() < 3 || response[0] != vocab.think_open() {
        return fail(false);
    }
    let Some(close) = response.iter().position(|&t| t == vocab.think_close()) else {
        return fail(false);
    };
    // Body must avoid specials entirely; `close` is the first close marker,
    // so the body cannot contain one.
    if response[1..close].iter().any(|&t| vocab.is_special(t)) {
        return fail(false);
    }
    // Exactly `digit <eos>` after the close marker, then nothing.
    if response.len() != close + 3 {
        return fail(false);
    }
    let digit = response[close + 1];
    if vocab.digit_value(digit).is_none() || response[close + 2] != vocab.eos() {
        return fail(false);
    }
    let answer_ok = digit == task.answer;
    RewardSignal {
        value: if answer_ok { 1.0 } else { 0.0 },
        format_ok: true,
        answer_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, stream};
    use alloc::vec;

    fn toks(v: &Vocab, s: &str) -> Vec<Token> {
        // Expression strings only: digits and operators, one char per token.
        s.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                v.parse_symbol(c.encode_utf8(&mut buf)).expect("known char")
            })
            .collect()
    }

    #[test]
    fn spec_validation_catches_bad_fields() {
        let ok = TaskSpec::default();
        assert_eq!(ok.validate(), Ok(()));
        for (field, spec) in [
            ("min", TaskSpec { min_steps: 0, ..ok }),
            ("max", TaskSpec { max_steps: 0, ..ok }),
            (
                "easy",
                TaskSpec {
                    easy_threshold: 0,
                    ..ok
                },
            ),
            ("mod-low", TaskSpec { modulus: 1, ..ok }),
            ("mod-high", TaskSpec { modulus: 11, ..ok }),
            (
                "frac",
                TaskSpec {
                    subjective_fraction: 1.5,
                    ..ok
                },
            ),
        ] {
            assert!(spec.validate().is_err(), "{field} should be rejected");
        }
    }

    #[test]
    fn single_sum_evaluates_mod_ten() {
        let v = Vocab::new();
        let q = toks(&v, "4+9");
        assert_eq!(evaluate_query(&q, 10, &v), Ok(3));
        assert_eq!(trace_query(&q, 10, &v), Ok(vec![3]));
    }

    #[test]
    fn chain_traces_running_partials() {
        let v = Vocab::new();
        // 2*3 = 6; 6+4 = 10 ≡ 0; 0*2 = 0.
        let q = toks(&v, "2*3+4*2");
        assert_eq!(trace_query(&q, 10, &v), Ok(vec![6, 0, 0]));
        assert_eq!(evaluate_query(&q, 10, &v), Ok(0));
    }

    #[test]
    fn evaluation_is_left_to_right_without_precedence() {
        let v = Vocab::new();
        // With precedence 2+3*4 would be 14 ≡ 4; left-to-right it is 20 ≡ 0.
        let q = toks(&v, "2+3*4");
        assert_eq!(evaluate_query(&q, 10, &v), Ok(0));
    }

    #[test]
    fn malformed_queries_are_rejected() {
        let v = Vocab::new();
        for bad in ["+", "4+", "44", "4++3"] {
            let q = toks(&v, bad);
            assert_eq!(evaluate_query(&q, 10, &v), Err(TaskError::MalformedQuery));
        }
        assert_eq!(evaluate_query(&[], 10, &v), Err(TaskError::MalformedQuery));
        assert_eq!(
            evaluate_query(&[v.sep()], 10, &v),
            Err(TaskError::MalformedQuery)
        );
    }

    #[test]
    fn sampled_tasks_are_consistent() {
        let v = Vocab::new();
        let spec = TaskSpec::default();
        let mut rng = rng::substream(7, &[stream::TASK_POOL]);
        for _ in 0..500 {
            let t = sample_task(&spec, &v, &mut rng);
            assert!((spec.min_steps..=spec.max_steps).contains(&t.steps));
            assert_eq!(t.query.len() as u32, 2 * t.steps + 1);
            let ans = evaluate_query(&t.query, t.modulus, &v).unwrap();
            assert_eq!(t.answer, v.digit(ans));
            assert_eq!(teacher_trace(&t, &v).len() as u32, t.steps);
        }
    }

    #[test]
    fn sampling_respects_step_range() {
        let v = Vocab::new();
        let spec = TaskSpec::default();
        let mut rng = rng::substream(7, &[stream::EVAL_SUITE]);
        for _ in 0..200 {
            let t = sample_task_in_range(&spec, 4, 6, &v, &mut rng);
            assert!((4..=6).contains(&t.steps));
            assert!(!t.is_easy(spec.easy_threshold));
        }
    }

    #[test]
    fn subjective_fraction_extremes_are_exact() {
        let v = Vocab::new();
        let mut rng = rng::substream(3, &[stream::TASK_POOL]);
        let all_obj = TaskSpec {
            subjective_fraction: 0.0,
            ..TaskSpec::default()
        };
        let all_subj = TaskSpec {
            subjective_fraction: 1.0,
            ..TaskSpec::default()
        };
        for _ in 0..50 {
            assert_eq!(sample_task(&all_obj, &v, &mut rng).kind, TaskKind::Objective);
            assert_eq!(
                sample_task(&all_subj, &v, &mut rng).kind,
                TaskKind::Subjective
            );
        }
    }

    fn demo_task(v: &Vocab) -> TaskInstance {
        TaskInstance {
            query: toks(v, "4+9"),
            answer: v.digit(3),
            steps: 1,
            kind: TaskKind::Objective,
            modulus: 10,
        }
    }

    #[test]
    fn correct_thinking_response_earns_reward() {
        let v = Vocab::new();
        let t = demo_task(&v);
        let resp = vec![
            v.think_open(),
            v.digit(3),
            v.think_close(),
            v.digit(3),
            v.eos(),
        ];
        let r = verify_answer(&t, &resp, &v);
        assert!(r.format_ok && r.answer_ok);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn correct_direct_response_earns_reward() {
        let v = Vocab::new();
        let t = demo_task(&v);
        let resp = vec![v.think_open(), v.think_close(), v.digit(3), v.eos()];
        assert_eq!(verify_answer(&t, &resp, &v).value, 1.0);
    }

    #[test]
    fn wrong_digit_fails_answer_but_not_format() {
        let v = Vocab::new();
        let t = demo_task(&v);
        let resp = vec![v.think_open(), v.think_close(), v.digit(7), v.eos()];
        let r = verify_answer(&t, &resp, &v);
        assert!(r.format_ok);
        assert!(!r.answer_ok);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn format_violations_earn_zero() {
        let v = Vocab::new();
        let t = demo_task(&v);
        let cases: Vec<Vec<Token>> = vec![
            // Truncated: no eos.
            vec![v.think_open(), v.think_close(), v.digit(3)],
            // Missing close marker.
            vec![v.think_open(), v.digit(3), v.eos()],
            // Special token inside the body.
            vec![
                v.think_open(),
                v.sep(),
                v.think_close(),
                v.digit(3),
                v.eos(),
            ],
            // Second open marker inside the body.
            vec![
                v.think_open(),
                v.think_open(),
                v.think_close(),
                v.digit(3),
                v.eos(),
            ],
            // Non-digit in the answer slot.
            vec![v.think_open(), v.think_close(), v.plus(), v.eos()],
            // Trailing garbage after eos.
            vec![
                v.think_open(),
                v.think_close(),
                v.digit(3),
                v.eos(),
                v.digit(3),
            ],
            // Doesn't start with the open marker.
            vec![v.think_close(), v.digit(3), v.eos()],
            // Too short to contain an answer.
            vec![v.think_open(), v.think_close()],
        ];
        for resp in cases {
            let r = verify_answer(&t, &resp, &v);
            assert!(!r.format_ok, "should fail format: {:?}", v.render(&resp));
            assert_eq!(r.value, 0.0);
        }
    }

    #[test]
    fn reasoning_body_content_is_unconstrained_beyond_specials() {
        let v = Vocab::new();
        let t = demo_task(&v);
        // Garbage (but non-special) reasoning with the right digit still earns
        // the reward: only the final answer is graded.
        let resp = vec![
            v.think_open(),
            v.plus(),
            v.times(),
            v.token(12).unwrap(), // reserved slot
            v.think_close(),
            v.digit(3),
            v.eos(),
        ];
        assert_eq!(verify_answer(&t, &resp, &v).value, 1.0);
    }
}
