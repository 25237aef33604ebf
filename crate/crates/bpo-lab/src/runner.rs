//! Experiment orchestration: the curate → SFT → RL → eval pipeline and the
//! run directory it owns.
//!
//! A run directory is laid out as:
//!
//! ```text
//! run/
//!   .lock             exclusive-ownership marker, created first
//!   config.toml       canonical snapshot of the parsed configuration
//!   corpus.txt        curated training corpus
//!   checkpoint_sft.bin  parameters after supervised warm-up
//!   checkpoint_rl.bin   parameters after reinforcement learning
//!   metrics.jsonl     one record per RL step, flushed as written
//!   final_eval.json   three-mode evaluation of both checkpoints
//!   manifest.json     stage ledger, wall-clock seconds, completion flag
//! ```
//!
//! Each stage reads its inputs from the directory and writes its outputs
//! back, so the full pipeline and the stage-at-a-time CLI take literally
//! the same code paths, and every full run exercises the artifact
//! round-trips. A failed stage leaves its partial artifacts in place and is
//! recorded in the manifest by name. Wall-clock time exists only in the
//! manifest; metrics stay byte-reproducible.

use std::fs;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use bpo_core::anneal::{curate_corpus, sft_train, ModeLabel, RejectionReport};
use bpo_core::checkpoint;
use bpo_core::eval::probe;
use bpo_core::optim::{rl_train, ProbeSettings};
use bpo_core::policy::{init_params, PolicyParams};
use bpo_core::rng::{self, stream};
use bpo_core::task::{sample_task, TaskInstance};
use bpo_core::vocab::Vocab;
use serde::{Deserialize, Serialize};

use crate::config::{AlgoChoice, RunConfig};
use crate::corpus::{corpus_queries, read_corpus, write_corpus};
use crate::error::{io_at, LabError};
use crate::metrics::{write_final_eval, FinalEval, JsonlSink};
use crate::suite::{build_disjoint_suite, verify_disjoint};

/// Exclusive-ownership marker.
pub const LOCK_FILE: &str = ".lock";
/// Canonical configuration snapshot.
pub const CONFIG_FILE: &str = "config.toml";
/// Curated training corpus.
pub const CORPUS_FILE: &str = "corpus.txt";
/// Post-warm-up checkpoint.
pub const SFT_CHECKPOINT: &str = "checkpoint_sft.bin";
/// Post-RL checkpoint.
pub const RL_CHECKPOINT: &str = "checkpoint_rl.bin";
/// Per-step metrics stream.
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Final three-mode evaluation.
pub const FINAL_EVAL_FILE: &str = "final_eval.json";
/// Stage ledger and wall clock.
pub const MANIFEST_FILE: &str = "manifest.json";

/// One stage's outcome in the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Stage name (`curate`, `sft`, `rl`, `eval`).
    pub stage: String,
    /// Whether the stage completed.
    pub ok: bool,
    /// One-line summary, or the error text for a failed stage.
    pub detail: String,
}

/// The completion manifest written at the end of every run, failed or not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// The run's master seed.
    pub seed: u64,
    /// Training arm name.
    pub algo: String,
    /// Whether every stage completed.
    pub completed: bool,
    /// Wall-clock seconds for the whole pipeline. Deliberately the only
    /// timing in the run directory.
    pub wall_clock_secs: f64,
    /// Per-stage ledger, in execution order.
    pub stages: Vec<StageEntry>,
}

/// Reads a manifest back.
pub fn read_manifest(path: &Path) -> Result<Manifest, LabError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), LabError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text).map_err(io_at(path))
}

/// What the curate stage reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurateSummary {
    /// Items that survived the filter.
    pub kept: usize,
    /// Of those, items labeled `reasoning`.
    pub reasoning: usize,
    /// Per-reason rejection counts.
    pub rejected: RejectionReport,
}

/// What the SFT stage reports.
#[derive(Clone, Debug, PartialEq)]
pub struct SftSummary {
    /// Corpus size trained on.
    pub items: usize,
    /// Mean cross-entropy per epoch (empty when `epochs = 0`).
    pub epoch_losses: Vec<f64>,
    /// True when the corpus carried only one of the two labels.
    pub single_label: bool,
}

/// What the RL stage reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RlSummary {
    /// Training steps taken.
    pub steps: usize,
    /// Which arm ran.
    pub algo: AlgoChoice,
}

fn read_checkpoint(path: &Path, what: &'static str) -> Result<PolicyParams, LabError> {
    if !path.exists() {
        return Err(LabError::MissingArtifact {
            what,
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(io_at(path))?;
    Ok(checkpoint::decode(&bytes)?)
}

fn write_checkpoint(path: &Path, params: &PolicyParams) -> Result<(), LabError> {
    fs::write(path, checkpoint::encode(params)).map_err(io_at(path))
}

fn ensure_dir(dir: &Path) -> Result<(), LabError> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Curates the training corpus into `dir/corpus.txt`.
///
/// The mining policy is the freshly initialized one — the same parameters
/// the warm-up starts from — so "can the base policy already solve this?"
/// is asked of the policy that will actually be trained.
pub fn cmd_curate(cfg: &RunConfig, dir: &Path) -> Result<CurateSummary, LabError> {
    cfg.validate()?;
    ensure_dir(dir)?;
    let vocab = Vocab::new();
    let spec = cfg.task.to_spec();
    let miner = init_params(cfg.seed, cfg.policy.to_dims())?;
    let mut pool_rng = rng::substream(cfg.seed, &[stream::TASK_POOL]);
    let pool: Vec<TaskInstance> = (0..cfg.curation.pool_size)
        .map(|_| sample_task(&spec, &vocab, &mut pool_rng))
        .collect();
    let (items, rejected) =
        curate_corpus(&pool, &miner, &cfg.curation.to_cfg(), &vocab, cfg.seed)?;
    write_corpus(&dir.join(CORPUS_FILE), &items, &vocab)?;
    let reasoning = items
        .iter()
        .filter(|i| i.label == ModeLabel::Reasoning)
        .count();
    Ok(CurateSummary {
        kept: items.len(),
        reasoning,
        rejected,
    })
}

/// Runs supervised warm-up on `dir/corpus.txt`, writing
/// `dir/checkpoint_sft.bin`.
pub fn cmd_sft(cfg: &RunConfig, dir: &Path) -> Result<SftSummary, LabError> {
    cfg.validate()?;
    let vocab = Vocab::new();
    let items = read_corpus_required(dir, &vocab)?;
    let init = init_params(cfg.seed, cfg.policy.to_dims())?;
    let outcome = sft_train(&init, &items, &cfg.sft.to_cfg(cfg.seed), &vocab)?;
    write_checkpoint(&dir.join(SFT_CHECKPOINT), &outcome.params)?;
    Ok(SftSummary {
        items: items.len(),
        epoch_losses: outcome.epoch_losses,
        single_label: outcome.single_label,
    })
}

/// Runs the RL loop from `dir/checkpoint_sft.bin`, writing
/// `dir/metrics.jsonl` and `dir/checkpoint_rl.bin`.
///
/// The in-training probe suite is rejection-sampled away from the corpus
/// (and re-verified), so probe metrics are genuinely held out.
pub fn cmd_rl(cfg: &RunConfig, dir: &Path, algo: AlgoChoice) -> Result<RlSummary, LabError> {
    cfg.validate()?;
    let vocab = Vocab::new();
    let spec = cfg.task.to_spec();
    let items = read_corpus_required(dir, &vocab)?;
    let banned = corpus_queries(&items, &vocab);
    let init = read_checkpoint(&dir.join(SFT_CHECKPOINT), "warm-up checkpoint")?;
    let probe_suite = build_disjoint_suite(
        &spec,
        cfg.eval.probe_easy,
        cfg.eval.probe_hard,
        cfg.eval.hard_min_steps,
        &banned,
        cfg.eval.suite_retries,
        &vocab,
        cfg.seed,
        stream::PROBE_SUITE,
    )?;
    verify_disjoint(&probe_suite, &banned, &vocab)?;
    let probe_settings = ProbeSettings {
        suite: probe_suite,
        interval: cfg.eval.probe_interval,
    };
    let metrics_path = dir.join(METRICS_FILE);
    let file = fs::File::create(&metrics_path).map_err(io_at(&metrics_path))?;
    let mut sink = JsonlSink::new(BufWriter::new(file), cfg.rl.batch_queries);
    let trained = rl_train(
        &init,
        algo.to_core(),
        &spec,
        &cfg.rl.to_cfg(),
        &cfg.generation.to_cfg(),
        Some(&probe_settings),
        &vocab,
        cfg.seed,
        &mut sink,
    )?;
    let mut writer = sink.finish()?;
    writer.flush().map_err(io_at(&metrics_path))?;
    write_checkpoint(&dir.join(RL_CHECKPOINT), &trained)?;
    Ok(RlSummary {
        steps: cfg.rl.iters,
        algo,
    })
}

/// Evaluates both checkpoints on a fresh held-out suite, writing
/// `dir/final_eval.json`.
pub fn cmd_eval(cfg: &RunConfig, dir: &Path) -> Result<FinalEval, LabError> {
    cfg.validate()?;
    let vocab = Vocab::new();
    let spec = cfg.task.to_spec();
    let items = read_corpus_required(dir, &vocab)?;
    let banned = corpus_queries(&items, &vocab);
    let post_sft = read_checkpoint(&dir.join(SFT_CHECKPOINT), "warm-up checkpoint")?;
    let post_rl = read_checkpoint(&dir.join(RL_CHECKPOINT), "RL checkpoint")?;
    let suite = build_disjoint_suite(
        &spec,
        cfg.eval.final_easy,
        cfg.eval.final_hard,
        cfg.eval.hard_min_steps,
        &banned,
        cfg.eval.suite_retries,
        &vocab,
        cfg.seed,
        stream::EVAL_SUITE,
    )?;
    verify_disjoint(&suite, &banned, &vocab)?;
    let max_len = cfg.generation.max_gen_len;
    let eval = FinalEval {
        post_sft: (&probe(&post_sft, &suite, max_len, &vocab)?).into(),
        post_rl: (&probe(&post_rl, &suite, max_len, &vocab)?).into(),
    };
    write_final_eval(&dir.join(FINAL_EVAL_FILE), &eval)?;
    Ok(eval)
}

fn read_corpus_required(
    dir: &Path,
    vocab: &Vocab,
) -> Result<Vec<bpo_core::anneal::CurationItem>, LabError> {
    let path = dir.join(CORPUS_FILE);
    if !path.exists() {
        return Err(LabError::MissingArtifact {
            what: "training corpus",
            path,
        });
    }
    read_corpus(&path, vocab)
}

/// Everything [`run_experiment`] hands back in memory (it all also lands
/// on disk).
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    /// The run directory.
    pub dir: PathBuf,
    /// Curated corpus size.
    pub kept_items: usize,
    /// The final evaluation of both checkpoints.
    pub final_eval: FinalEval,
}

fn stage<T>(
    stages: &mut Vec<StageEntry>,
    name: &str,
    f: impl FnOnce() -> Result<(T, String), LabError>,
) -> Result<T, LabError> {
    match f() {
        Ok((value, detail)) => {
            stages.push(StageEntry {
                stage: name.into(),
                ok: true,
                detail,
            });
            Ok(value)
        }
        Err(e) => {
            stages.push(StageEntry {
                stage: name.into(),
                ok: false,
                detail: e.to_string(),
            });
            Err(e)
        }
    }
}

fn pipeline(cfg: &RunConfig, dir: &Path, stages: &mut Vec<StageEntry>) -> Result<RunOutcome, LabError> {
    let kept = stage(stages, "curate", || {
        let s = cmd_curate(cfg, dir)?;
        let detail = format!(
            "kept {} items ({} reasoning, {} direct); rejected {} (consistency {}, keyword {}, duplicate {})",
            s.kept,
            s.reasoning,
            s.kept - s.reasoning,
            s.rejected.total(),
            s.rejected.consistency,
            s.rejected.keyword,
            s.rejected.duplicate,
        );
        Ok((s.kept, detail))
    })?;
    stage(stages, "sft", || {
        let s = cmd_sft(cfg, dir)?;
        let detail = match (s.epoch_losses.first(), s.epoch_losses.last()) {
            (Some(first), Some(last)) => format!(
                "{} items, {} epochs, loss {:.4} -> {:.4}{}",
                s.items,
                s.epoch_losses.len(),
                first,
                last,
                if s.single_label { " (single-label corpus!)" } else { "" },
            ),
            _ => format!("{} items, 0 epochs (no-op)", s.items),
        };
        Ok(((), detail))
    })?;
    stage(stages, "rl", || {
        let s = cmd_rl(cfg, dir, cfg.algo)?;
        Ok(((), format!("{} steps of {}", s.steps, s.algo.name())))
    })?;
    let final_eval = stage(stages, "eval", || {
        let e = cmd_eval(cfg, dir)?;
        let auto = &e.post_rl.auto;
        let detail = format!(
            "post-RL auto: acc {:.3}, trigger easy {} / hard {}",
            auto.overall.accuracy,
            auto.easy
                .trigger_rate
                .map_or_else(|| "-".into(), |t| format!("{t:.3}")),
            auto.hard
                .trigger_rate
                .map_or_else(|| "-".into(), |t| format!("{t:.3}")),
        );
        Ok((e, detail))
    })?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        kept_items: kept,
        final_eval,
    })
}

/// Runs the whole pipeline into `dir`.
///
/// Locking, the config snapshot, and directory creation happen before any
/// compute, so permission problems surface immediately. The manifest is
/// written whether the pipeline succeeds or not; a failed stage's error is
/// recorded under its stage name and partial artifacts stay in place.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome, LabError> {
    cfg.validate()?;
    ensure_dir(dir)?;
    let lock_path = dir.join(LOCK_FILE);
    let mut lock = match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(LabError::Locked(dir.to_path_buf()));
        }
        Err(e) => return Err(LabError::Io { path: lock_path, source: e }),
    };
    lock.write_all(b"bpo-lab run lock\n")
        .map_err(io_at(&lock_path))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml_string()).map_err(io_at(&config_path))?;

    let started = Instant::now();
    let mut stages = Vec::new();
    let result = pipeline(cfg, dir, &mut stages);
    let manifest = Manifest {
        seed: cfg.seed,
        algo: cfg.algo.name().into(),
        completed: result.is_ok(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        stages,
    };
    let manifest_result = write_manifest(&dir.join(MANIFEST_FILE), &manifest);
    match result {
        Ok(outcome) => manifest_result.map(|()| outcome),
        Err(e) => Err(e),
    }
}
