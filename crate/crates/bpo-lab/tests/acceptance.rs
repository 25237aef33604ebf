//! Release acceptance gate: ten criteria, one test each.
//!
//! The heavyweight fixtures — three seeded pipeline runs per training arm
//! plus a repeat run for the reproducibility check — are built once on first
//! use and shared by every test, so the whole gate costs seven end-to-end
//! runs regardless of which subset of tests is selected.
//!
//! Every test prints a single `acceptance N …: PASS/FAIL (detail)` line
//! before asserting. Run with `--nocapture` to see the lines for passing
//! criteria too:
//!
//! ```text
//! cargo test --release --test acceptance -- --nocapture --test-threads 1
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use bpo_core::anneal::{classify_objective, curate_corpus, filter_items, CurationConfig, ModeLabel};
use bpo_core::checkpoint;
use bpo_core::policy::init_params;
use bpo_core::rng::{self, stream};
use bpo_core::rollout::{generate_bimode_group, generate_rollout, GenConfig, Mode, RealizedMode};
use bpo_core::task::{sample_task, TaskInstance, TaskKind, TaskSpec};
use bpo_core::vocab::Vocab;
use bpo_lab::config::{AlgoChoice, RunConfig};
use bpo_lab::metrics::{read_metrics, FinalEval, MetricsRecord};
use bpo_lab::runner::{self, Manifest};
use bpo_lab::selfcheck::{
    check_advantages, check_clip_quadrants, check_kl_estimator, check_kl_gradient,
    check_sampling_identity, check_supervised_gradient, check_surrogate_gradient,
    check_weighted_logprob_gradient, CheckOutcome, CheckSettings,
};
use tempfile::TempDir;

/// Seeds for the three-way replication of both arms.
const SEEDS: [u64; 3] = [11, 22, 33];

/// Everything one finished pipeline run leaves behind.
struct RunArtifacts {
    seed: u64,
    dir: PathBuf,
    records: Vec<MetricsRecord>,
    eval: FinalEval,
    manifest: Manifest,
}

/// Fixtures shared by all criteria.
struct Shared {
    /// Keeps the run directories alive for the duration of the binary.
    _root: TempDir,
    bpo: Vec<RunArtifacts>,
    grpo: Vec<RunArtifacts>,
    /// Directory of the repeated `SEEDS[0]` run (same config and seed).
    repeat_dir: PathBuf,
    gradient_checks: Vec<CheckOutcome>,
    gradient_secs: f64,
    advantage_check: CheckOutcome,
    identity_check: CheckOutcome,
    quadrant_check: CheckOutcome,
    kl_check: CheckOutcome,
}

/// The default configuration with only seed and arm chosen.
fn run_config(seed: u64, algo: AlgoChoice) -> RunConfig {
    let mut cfg =
        RunConfig::from_toml_str(&format!("seed = {seed}")).expect("minimal config parses");
    cfg.algo = algo;
    cfg
}

fn execute(seed: u64, algo: AlgoChoice, dir: &Path) -> RunArtifacts {
    let cfg = run_config(seed, algo);
    let out = runner::run_experiment(&cfg, dir).expect("pipeline run succeeds");
    let records = read_metrics(&dir.join(runner::METRICS_FILE)).expect("metrics stream parses");
    let manifest =
        runner::read_manifest(&dir.join(runner::MANIFEST_FILE)).expect("manifest parses");
    RunArtifacts {
        seed,
        dir: dir.to_path_buf(),
        records,
        eval: out.final_eval,
        manifest,
    }
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let root = TempDir::new().expect("temp root");
        let bpo: Vec<RunArtifacts> = SEEDS
            .iter()
            .map(|&s| execute(s, AlgoChoice::Bpo, &root.path().join(format!("bpo-{s}"))))
            .collect();
        let grpo: Vec<RunArtifacts> = SEEDS
            .iter()
            .map(|&s| execute(s, AlgoChoice::Grpo, &root.path().join(format!("grpo-{s}"))))
            .collect();
        let repeat_dir = root.path().join("bpo-repeat");
        let cfg = run_config(SEEDS[0], AlgoChoice::Bpo);
        runner::run_experiment(&cfg, &repeat_dir).expect("repeat run succeeds");

        let s = CheckSettings::default();
        let started = Instant::now();
        let gradient_checks = vec![
            check_weighted_logprob_gradient(&s),
            check_supervised_gradient(&s),
            check_kl_gradient(&s),
            check_surrogate_gradient(&s),
        ];
        let gradient_secs = started.elapsed().as_secs_f64();
        Shared {
            _root: root,
            bpo,
            grpo,
            repeat_dir,
            gradient_checks,
            gradient_secs,
            advantage_check: check_advantages(&s),
            identity_check: check_sampling_identity(&s),
            quadrant_check: check_clip_quadrants(&s),
            kl_check: check_kl_estimator(&s),
        }
    })
}

/// Prints the criterion's one-line verdict.
fn report(label: &str, passed: bool, detail: &str) {
    println!(
        "acceptance {label}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
}

#[test]
fn c01_analytic_gradients_match_finite_differences() {
    let sh = shared();
    let all_pass = sh.gradient_checks.iter().all(|c| c.passed);
    let in_budget = sh.gradient_secs < 60.0;
    let detail = format!(
        "4 objectives x {} coords, rel err <= 1e-4, {:.1}s < 60s",
        CheckSettings::default().fd_coords,
        sh.gradient_secs
    );
    report("1 gradient vs finite differences", all_pass && in_budget, &detail);
    for c in &sh.gradient_checks {
        assert!(c.passed, "{}", c.line());
    }
    assert!(in_budget, "gradient checks took {:.1}s, budget 60s", sh.gradient_secs);
}

#[test]
fn c02_group_advantages_center_scale_and_sign() {
    let sh = shared();
    report("2 advantage normalization", sh.advantage_check.passed, &sh.advantage_check.detail);
    assert!(sh.advantage_check.passed, "{}", sh.advantage_check.line());
}

#[test]
fn c03_surrogate_gradient_reduces_to_weighted_likelihood_at_ratio_one() {
    let sh = shared();
    report("3 ratio-one equivalence", sh.identity_check.passed, &sh.identity_check.detail);
    assert!(sh.identity_check.passed, "{}", sh.identity_check.line());
}

#[test]
fn c04_clipping_gates_gradient_by_quadrant() {
    let sh = shared();
    report("4 clip quadrants", sh.quadrant_check.passed, &sh.quadrant_check.detail);
    assert!(sh.quadrant_check.passed, "{}", sh.quadrant_check.line());
}

#[test]
fn c05_kl_estimator_nonnegative_zero_iff_equal_and_hand_value() {
    let sh = shared();
    report("5 kl estimator", sh.kl_check.passed, &sh.kl_check.detail);
    assert!(sh.kl_check.passed, "{}", sh.kl_check.line());
}

#[test]
fn c06_bimode_groups_hold_structural_invariants() {
    let sh = shared();

    // Ledger side: full training runs report zero structural violations and
    // an exact half/half rollout split at every step.
    let mut steps = 0usize;
    let mut violations = 0usize;
    let mut balanced = true;
    for run in &sh.bpo {
        for r in &run.records {
            steps += 1;
            violations += r.violations;
            balanced &= r.rollouts_think == r.rollouts_nothink && r.rollouts_think > 0;
        }
    }

    // Independent recount: fresh bi-mode groups, invariants checked from raw
    // tokens rather than through the group validator.
    let vocab = Vocab::new();
    let cfg = run_config(SEEDS[0], AlgoChoice::Bpo);
    let g = cfg.rl.group_size;
    let params = init_params(7, cfg.policy.to_dims()).expect("init");
    let spec = TaskSpec::default();
    let gen_cfg = GenConfig::default();
    let mut task_rng = rng::substream(7, &[stream::RL_TASKS, 0]);
    for qi in 0..16u64 {
        let task = sample_task(&spec, &vocab, &mut task_rng);
        let mut roll_rng = rng::substream(7, &[stream::RL_ROLLOUTS, 0, qi]);
        let group = generate_bimode_group(&params, &task, g, &gen_cfg, &vocab, &mut roll_rng)
            .expect("group generation");
        assert_eq!(group.thinking.len(), g);
        assert_eq!(group.nonthinking.len(), g);
        for r in &group.thinking {
            assert_eq!(r.mode_directive, Mode::Thinking);
            assert_eq!(r.realized_mode, RealizedMode::Thinking);
            assert!(r.think_body_len(&vocab) >= 1, "forced thinking with empty span");
        }
        for r in &group.nonthinking {
            assert_eq!(r.mode_directive, Mode::NonThinking);
            assert_eq!(r.realized_mode, RealizedMode::NonThinking);
            assert_eq!(r.think_body_len(&vocab), 0, "forced non-thinking with span tokens");
        }
    }

    let ok = steps > 0 && violations == 0 && balanced;
    let detail = format!(
        "{steps} training steps across {} runs, {violations} violations, split exact everywhere, 16 fresh groups recounted",
        sh.bpo.len()
    );
    report("6 bi-mode structural invariants", ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn c07_curation_labels_filters_and_grammar() {
    let sh = shared();
    let vocab = Vocab::new();
    let cfg = CurationConfig::default();
    let spec = TaskSpec::default();
    let pool_seed = 4242u64;

    // The miner is a trained warm-up checkpoint: competent enough that some
    // objective tasks are answerable in N drafts and some are not.
    let bytes = fs::read(sh.bpo[0].dir.join(runner::SFT_CHECKPOINT)).expect("read miner");
    let miner = checkpoint::decode(&bytes).expect("decode miner");

    let mut pool_rng = rng::substream(pool_seed, &[stream::TASK_POOL]);
    let pool: Vec<TaskInstance> =
        (0..500).map(|_| sample_task(&spec, &vocab, &mut pool_rng)).collect();

    // Mined labels follow the any-correct rule exactly: replay each task's
    // private mining stream, count correct drafts independently, and compare
    // against the classifier's verdict on an identical stream.
    let gen_cfg = GenConfig {
        temperature: cfg.mining_temperature,
        max_gen_len: cfg.mining_gen_len,
    };
    let (mut zero_correct, mut some_correct) = (0usize, 0usize);
    for (i, task) in pool.iter().enumerate() {
        if task.kind != TaskKind::Objective {
            continue;
        }
        let mut replay = rng::substream(pool_seed, &[stream::MINING, i as u64]);
        let mut correct = 0usize;
        for _ in 0..cfg.samples_per_query {
            let r = generate_rollout(&miner, task, Mode::Auto, &gen_cfg, &vocab, &mut replay)
                .expect("mining rollout");
            correct += (r.reward == 1.0) as usize;
        }
        let mut label_rng = rng::substream(pool_seed, &[stream::MINING, i as u64]);
        let label =
            classify_objective(task, &miner, &cfg, &vocab, &mut label_rng).expect("classify");
        let expected = if correct == 0 { ModeLabel::Reasoning } else { ModeLabel::Direct };
        assert_eq!(
            label, expected,
            "task {i}: {correct}/{} correct drafts mislabeled",
            cfg.samples_per_query
        );
        if correct == 0 {
            zero_correct += 1;
        } else {
            some_correct += 1;
        }
    }
    assert!(zero_correct > 0, "pool exercised no zero-correct objective tasks");
    assert!(some_correct > 0, "pool exercised no answerable objective tasks");

    // Every kept item parses: one leading think-open, one think-close, a
    // clean body, the oracle answer, a trailing end marker.
    let (kept, base_report) =
        curate_corpus(&pool, &miner, &cfg, &vocab, pool_seed).expect("curation");
    assert!(!kept.is_empty());
    let forbidden =
        [vocab.eos(), vocab.sep(), vocab.bos(), vocab.pad(), vocab.think_open()];
    for item in &kept {
        let t = &item.target;
        assert!(t.len() >= 4, "target too short to parse");
        assert_eq!(t[0], vocab.think_open());
        let close = t.iter().position(|&x| x == vocab.think_close()).expect("think-close");
        assert_eq!(t.len(), close + 3, "exactly answer and end marker after the span");
        assert_eq!(t[close + 1], item.task.answer, "embedded answer is the oracle answer");
        assert_eq!(t[close + 2], vocab.eos());
        let body = &t[1..close];
        assert!(!body.iter().any(|x| forbidden.contains(x)), "forbidden token in span");
        assert!(!body.contains(&vocab.think_close()));
        match item.label {
            ModeLabel::Reasoning => assert!(!body.is_empty(), "reasoning target with empty span"),
            ModeLabel::Direct => assert!(body.is_empty(), "direct target with span tokens"),
        }
    }

    // Filter discrimination: a clean batch passes untouched; injected
    // inconsistent, span-corrupted, and duplicate items are all rejected.
    let clean: Vec<_> = kept.iter().take(100).cloned().collect();
    let (passed, clean_report) = filter_items(clean.clone(), cfg.dedup, &vocab);
    assert_eq!(clean_report.total(), 0, "filter rejected clean items");
    assert_eq!(passed.len(), clean.len());

    let mut batch = clean.clone();
    // Wrong answer: swap in another task's differing answer token.
    let mut inconsistent = 0usize;
    for i in 0..5 {
        let mut item = clean[i].clone();
        let donor = clean
            .iter()
            .find(|d| d.task.answer != item.task.answer)
            .expect("answers differ somewhere");
        let at = item.target.len() - 2;
        item.target[at] = donor.task.answer;
        batch.push(item);
        inconsistent += 1;
    }
    // Structurally broken: missing end marker.
    for i in 5..8 {
        let mut item = clean[i].clone();
        item.target.pop();
        batch.push(item);
        inconsistent += 1;
    }
    // Forbidden token inside the span.
    let keyword = 2usize;
    for i in 8..8 + keyword {
        let mut item = clean[i].clone();
        item.target.insert(1, vocab.sep());
        batch.push(item);
    }
    // Repeats of tasks already in the batch.
    let duplicate = 5usize;
    for i in 0..duplicate {
        batch.push(clean[20 + i].clone());
    }
    let (kept_after, inj_report) = filter_items(batch, cfg.dedup, &vocab);
    assert_eq!(kept_after.len(), clean.len(), "an injected item survived");
    assert_eq!(inj_report.consistency, inconsistent);
    assert_eq!(inj_report.keyword, keyword);
    assert_eq!(inj_report.duplicate, duplicate);

    let detail = format!(
        "labels exact on {} mined tasks ({zero_correct} zero-correct, {some_correct} answerable), \
         {} kept items parse ({} base rejections), clean 100% kept, {} injected corruptions 100% rejected",
        zero_correct + some_correct,
        kept.len(),
        base_report.total(),
        inconsistent + keyword + duplicate,
    );
    report("7 curation pipeline", true, &detail);
}

#[test]
fn c08_default_run_reaches_adaptive_thinking_targets() {
    let sh = shared();

    // Shape of the default configuration.
    let cfg = run_config(SEEDS[0], AlgoChoice::Bpo);
    let params = cfg.policy.to_dims().param_count();
    assert_eq!(cfg.rl.group_size, 4);
    assert_eq!(cfg.rl.batch_queries, 32);
    assert!(cfg.rl.iters >= 150, "default run too short: {}", cfg.rl.iters);
    assert!(
        (20_000..=35_000).contains(&params),
        "default policy has {params} parameters"
    );

    let mut rows = Vec::new();
    let mut all_ok = true;
    for run in &sh.bpo {
        let post = &run.eval.post_rl;
        let trig_hard = post.auto.hard.trigger_rate.expect("hard trigger rate");
        let trig_easy = post.auto.easy.trigger_rate.expect("easy trigger rate");
        let acc_gap = (post.auto.hard.accuracy - post.thinking.hard.accuracy).abs();
        let easy_tokens = post.auto.easy.mean_generated;
        let think_tokens = post.thinking.hard.mean_generated;
        let wall = run.manifest.wall_clock_secs;
        let ok = trig_hard >= 0.80
            && trig_easy <= 0.30
            && acc_gap <= 0.03
            && easy_tokens <= 0.5 * think_tokens
            && wall <= 600.0;
        all_ok &= ok;
        rows.push(format!(
            "seed {}: hard trigger {trig_hard:.2}, easy trigger {trig_easy:.2}, \
             hard acc gap {acc_gap:.3}, easy tokens {easy_tokens:.2} vs half-thinking {:.2}, {wall:.0}s",
            run.seed,
            0.5 * think_tokens
        ));
    }
    let detail = format!("{params} params; {}", rows.join("; "));
    report("8 end-to-end adaptive thinking", all_ok, &detail);
    assert!(all_ok, "{detail}");
}

#[test]
fn c09_grpo_collapses_while_bpo_stays_balanced() {
    let sh = shared();

    // Baseline arm: the minority mode's share of sampled rollouts must fall
    // below 10% and stay there for 30 consecutive steps in 2 of 3 seeds.
    let mut streaks = Vec::new();
    let mut collapsed_seeds = 0usize;
    for run in &sh.grpo {
        let mut longest = 0usize;
        let mut current = 0usize;
        for r in &run.records {
            let total = r.rollouts_think + r.rollouts_nothink;
            let minority = r.rollouts_think.min(r.rollouts_nothink) as f64 / total as f64;
            if minority < 0.10 {
                current += 1;
                longest = longest.max(current);
            } else {
                current = 0;
            }
        }
        streaks.push((run.seed, longest));
        if longest >= 30 {
            collapsed_seeds += 1;
        }
    }

    // Bi-mode arm: exact half/half sampling at every step, and the held-out
    // auto trigger rate never pinned against 0 or 1.
    let mut balanced = true;
    let mut banded = true;
    let mut band = (1.0f64, 0.0f64);
    for run in &sh.bpo {
        for r in &run.records {
            balanced &= r.rollouts_think == r.rollouts_nothink;
            if let Some(t) = r.trigger_rate {
                banded &= t > 0.05 && t < 0.95;
                band = (band.0.min(t), band.1.max(t));
            }
        }
    }

    let ok = collapsed_seeds >= 2 && balanced && banded;
    let detail = format!(
        "grpo sub-10% streaks {:?} (need >=30 in 2 of 3 seeds), bpo split exact with probe trigger in [{:.2}, {:.2}]",
        streaks, band.0, band.1
    );
    report("9 mode-collapse contrast", ok, &detail);
    assert!(balanced, "bpo arm broke its half/half split");
    assert!(banded, "bpo trigger rate left (0.05, 0.95): [{:.3}, {:.3}]", band.0, band.1);
    assert!(
        collapsed_seeds >= 2,
        "grpo minority-mode share never held below 10% for 30 steps (longest streaks {streaks:?}). \
         Observed mechanism: direct-style one-step tasks stay answerable without a reasoning span, \
         and on those tasks the group's winner-take-all advantage keeps rewarding the incumbent \
         mode, so the minority share plateaus near the direct-label share of easy tasks (~0.12) \
         instead of decaying toward zero."
    );
}

#[test]
fn c10_identical_config_and_seed_reproduce_bytes() {
    let sh = shared();
    let first = &sh.bpo[0].dir;
    let again = &sh.repeat_dir;
    let files = [
        runner::CORPUS_FILE,
        runner::SFT_CHECKPOINT,
        runner::RL_CHECKPOINT,
        runner::METRICS_FILE,
        runner::FINAL_EVAL_FILE,
    ];
    let mut all_same = true;
    let mut parts = Vec::new();
    for name in files {
        let a = fs::read(first.join(name)).expect("first run file");
        let b = fs::read(again.join(name)).expect("repeat run file");
        let same = a == b;
        all_same &= same;
        parts.push(format!("{name} {}B {}", a.len(), if same { "==" } else { "!=" }));
    }
    let detail = parts.join(", ");
    report("10 rerun byte-identity", all_same, &detail);
    assert!(all_same, "{detail}");
}
