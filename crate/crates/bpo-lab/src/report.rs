//! Report generation: plot-ready columnar files and the final comparison
//! table, derived from a run's metrics stream and final evaluation.
//!
//! Reports are derived artifacts — regenerating them never changes primary
//! state, and deleting them loses nothing. They land in `run/reports/`:
//!
//! ```text
//! trigger_rate.tsv   step, easy_rate, hard_rate        (probe steps)
//! accuracy.tsv       step, acc_think, acc_nothink, acc_auto
//! mode_items.tsv     step, think_items, nothink_items  (every step)
//! token_budget.tsv   step, per mode x stratum means    (probe steps)
//! final_modes.txt    {N-T, A-T, T} x {post-SFT, post-RL} table
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_at, LabError};
use crate::metrics::{read_final_eval, read_metrics, CheckpointEval, MetricsRecord, ModeReport};
use crate::runner::{FINAL_EVAL_FILE, METRICS_FILE};

/// Where each generated report file landed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    /// The `reports/` directory.
    pub dir: PathBuf,
    /// Trigger-rate-vs-step columns.
    pub trigger_rate: PathBuf,
    /// Accuracy-vs-step columns.
    pub accuracy: PathBuf,
    /// Per-mode correct-items-vs-step columns.
    pub mode_items: PathBuf,
    /// Per-mode token budgets vs step.
    pub token_budget: PathBuf,
    /// The final three-mode, two-checkpoint comparison table.
    pub final_modes: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn write_file(path: &Path, text: &str) -> Result<(), LabError> {
    fs::write(path, text).map_err(io_at(path))
}

fn trigger_rate_table(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step\teasy_rate\thard_rate\n");
    for r in records.iter().filter(|r| r.probed()) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            r.step,
            opt(r.trigger_rate_easy),
            opt(r.trigger_rate_hard)
        );
    }
    out
}

fn accuracy_table(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step\tacc_think\tacc_nothink\tacc_auto\n");
    for r in records.iter().filter(|r| r.probed()) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.step,
            opt(r.acc_think),
            opt(r.acc_nothink),
            opt(r.acc_auto)
        );
    }
    out
}

fn mode_items_table(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step\tthink_items\tnothink_items\n");
    for r in records {
        let _ = writeln!(out, "{}\t{:.4}\t{:.4}", r.step, r.items_think, r.items_nothink);
    }
    out
}

fn token_budget_table(records: &[MetricsRecord]) -> String {
    let mut out = String::from(
        "step\tauto_easy\tauto_hard\tthink_easy\tthink_hard\tnothink_easy\tnothink_hard\n",
    );
    for r in records.iter().filter(|r| r.probed()) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.step,
            opt(r.tokens_auto_easy),
            opt(r.tokens_auto_hard),
            opt(r.tokens_think_easy),
            opt(r.tokens_think_hard),
            opt(r.tokens_nothink_easy),
            opt(r.tokens_nothink_hard)
        );
    }
    out
}

fn final_mode_row(out: &mut String, checkpoint: &str, mode: &str, m: &ModeReport) {
    let _ = writeln!(
        out,
        "{checkpoint}\t{mode}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{}\t{}",
        m.easy.accuracy,
        m.hard.accuracy,
        m.overall.accuracy,
        m.easy.mean_generated,
        m.hard.mean_generated,
        opt(m.easy.trigger_rate),
        opt(m.hard.trigger_rate),
    );
}

fn final_modes_table(post_sft: &CheckpointEval, post_rl: &CheckpointEval) -> String {
    let mut out = String::from(
        "checkpoint\tmode\tacc_easy\tacc_hard\tacc_all\ttokens_easy\ttokens_hard\ttrigger_easy\ttrigger_hard\n",
    );
    for (name, eval) in [("post-SFT", post_sft), ("post-RL", post_rl)] {
        final_mode_row(&mut out, name, "N-T", &eval.nonthinking);
        final_mode_row(&mut out, name, "A-T", &eval.auto);
        final_mode_row(&mut out, name, "T", &eval.thinking);
    }
    out
}

/// Generates every report for a completed run directory.
///
/// Requires a metrics stream with at least one training step and the final
/// evaluation document; a 0-step run has nothing to report and errors.
pub fn report(run_dir: &Path) -> Result<ReportPaths, LabError> {
    let records = read_metrics(&run_dir.join(METRICS_FILE))?;
    if records.is_empty() {
        return Err(LabError::NoRlMetrics);
    }
    let final_eval = read_final_eval(&run_dir.join(FINAL_EVAL_FILE))?;
    let dir = run_dir.join("reports");
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let paths = ReportPaths {
        trigger_rate: dir.join("trigger_rate.tsv"),
        accuracy: dir.join("accuracy.tsv"),
        mode_items: dir.join("mode_items.tsv"),
        token_budget: dir.join("token_budget.tsv"),
        final_modes: dir.join("final_modes.txt"),
        dir,
    };
    write_file(&paths.trigger_rate, &trigger_rate_table(&records))?;
    write_file(&paths.accuracy, &accuracy_table(&records))?;
    write_file(&paths.mode_items, &mode_items_table(&records))?;
    write_file(&paths.token_budget, &token_budget_table(&records))?;
    write_file(
        &paths.final_modes,
        &final_modes_table(&final_eval.post_sft, &final_eval.post_rl),
    )?;
    Ok(paths)
}
