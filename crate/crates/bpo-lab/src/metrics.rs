//! Metrics persistence: the per-step JSONL stream and the final-evaluation
//! JSON document.
//!
//! One record per training step, one JSON object per line, appended and
//! flushed as each step finishes — a crashed run leaves a valid prefix of
//! the stream a completed run would have written. Records carry no
//! wall-clock, so two runs of the same config and seed produce
//! byte-identical streams; timing lives in the manifest instead.
//!
//! Probe-derived fields (trigger rates, per-mode accuracies, per-mode token
//! budgets) exist only on steps that probed the held-out suite; on other
//! steps they are absent from the JSON rather than zero, because a zero
//! trigger rate and a skipped probe mean different things.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use bpo_core::eval::{EvalFragment, ProbeMetrics, StratumEval};
use bpo_core::optim::{MetricsSink, TrainStepMetrics};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, LabError};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// Training step, from 0, strictly increasing within a stream.
    pub step: usize,
    /// Objective total (surrogate minus the KL penalty).
    pub total: f64,
    /// Clipped-surrogate component.
    pub surrogate: f64,
    /// KL component.
    pub kl: f64,
    /// Fraction of generated tokens whose ratio was clipped.
    pub clip_fraction: f64,
    /// Mean reward of rollouts that realized thinking (absent if none did).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_think: Option<f64>,
    /// Mean reward of rollouts that realized non-thinking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_nothink: Option<f64>,
    /// Sampled rollouts that realized thinking.
    pub rollouts_think: usize,
    /// Sampled rollouts that realized non-thinking.
    pub rollouts_nothink: usize,
    /// Correct thinking rollouts per query group (the mode-collapse
    /// statistic).
    pub items_think: f64,
    /// Correct non-thinking rollouts per query group.
    pub items_nothink: f64,
    /// Bi-mode groups violating their structural contract this step.
    pub violations: usize,
    /// Mean generated tokens per rollout over the batch's easy tasks.
    pub batch_tokens_easy: f64,
    /// Mean generated tokens per rollout over the batch's hard tasks.
    pub batch_tokens_hard: f64,
    /// Held-out auto-mode trigger rate, easy stratum (probe steps only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_rate_easy: Option<f64>,
    /// Held-out auto-mode trigger rate, hard stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_rate_hard: Option<f64>,
    /// Held-out auto-mode trigger rate over the whole probe suite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_rate: Option<f64>,
    /// Held-out forced-thinking accuracy (whole suite).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_think: Option<f64>,
    /// Held-out forced-non-thinking accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_nothink: Option<f64>,
    /// Held-out auto-mode accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_auto: Option<f64>,
    /// Held-out mean generated tokens, auto mode, easy stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_auto_easy: Option<f64>,
    /// Held-out mean generated tokens, auto mode, hard stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_auto_hard: Option<f64>,
    /// Held-out mean generated tokens, forced thinking, easy stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_think_easy: Option<f64>,
    /// Held-out mean generated tokens, forced thinking, hard stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_think_hard: Option<f64>,
    /// Held-out mean generated tokens, forced non-thinking, easy stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_nothink_easy: Option<f64>,
    /// Held-out mean generated tokens, forced non-thinking, hard stratum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_nothink_hard: Option<f64>,
}

impl MetricsRecord {
    /// Flattens one training step, normalizing the per-mode correct counts
    /// by the number of query groups in the batch.
    pub fn from_step(m: &TrainStepMetrics, batch_queries: usize) -> Self {
        let q = batch_queries.max(1) as f64;
        let probe = m.probe.as_ref();
        let auto = probe.map(|p| &p.auto_mode);
        let think = probe.map(|p| &p.forced_thinking);
        let nothink = probe.map(|p| &p.forced_nonthinking);
        MetricsRecord {
            step: m.step,
            total: m.total,
            surrogate: m.surrogate,
            kl: m.kl,
            clip_fraction: m.clip_fraction,
            reward_think: m.reward_thinking,
            reward_nothink: m.reward_nonthinking,
            rollouts_think: m.rollouts_thinking,
            rollouts_nothink: m.rollouts_nonthinking,
            items_think: m.correct_thinking as f64 / q,
            items_nothink: m.correct_nonthinking as f64 / q,
            violations: m.structural_violations,
            batch_tokens_easy: m.batch_tokens.easy.mean_generated,
            batch_tokens_hard: m.batch_tokens.hard.mean_generated,
            trigger_rate_easy: auto.and_then(|f| f.easy.trigger_rate),
            trigger_rate_hard: auto.and_then(|f| f.hard.trigger_rate),
            trigger_rate: auto.and_then(|f| f.overall.trigger_rate),
            acc_think: think.map(|f| f.overall.accuracy),
            acc_nothink: nothink.map(|f| f.overall.accuracy),
            acc_auto: auto.map(|f| f.overall.accuracy),
            tokens_auto_easy: auto.map(|f| f.easy.mean_generated),
            tokens_auto_hard: auto.map(|f| f.hard.mean_generated),
            tokens_think_easy: think.map(|f| f.easy.mean_generated),
            tokens_think_hard: think.map(|f| f.hard.mean_generated),
            tokens_nothink_easy: nothink.map(|f| f.easy.mean_generated),
            tokens_nothink_hard: nothink.map(|f| f.hard.mean_generated),
        }
    }

    /// Whether this step probed the held-out suite.
    pub fn probed(&self) -> bool {
        self.acc_auto.is_some()
    }
}

/// A [`MetricsSink`] that appends one JSON line per step and flushes it
/// immediately.
///
/// The sink trait cannot return errors, so the first write failure is
/// stashed and surfaced by [`JsonlSink::finish`]; later records are
/// dropped rather than written out of order after a gap.
pub struct JsonlSink<W: Write> {
    out: W,
    batch_queries: usize,
    next_step: usize,
    failure: Option<LabError>,
}

impl<W: Write> JsonlSink<W> {
    /// Wraps a writer. `batch_queries` normalizes the per-mode item counts.
    pub fn new(out: W, batch_queries: usize) -> Self {
        JsonlSink {
            out,
            batch_queries,
            next_step: 0,
            failure: None,
        }
    }

    /// Surfaces any write failure and hands the writer back.
    pub fn finish(mut self) -> Result<W, LabError> {
        if let Some(e) = self.failure.take() {
            return Err(e);
        }
        Ok(self.out)
    }

    fn try_record(&mut self, m: &TrainStepMetrics) -> io::Result<()> {
        let record = MetricsRecord::from_step(m, self.batch_queries);
        let line = serde_json::to_string(&record).expect("record serialization cannot fail");
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, m: &TrainStepMetrics) {
        if self.failure.is_some() {
            return;
        }
        if m.step != self.next_step {
            self.failure = Some(LabError::Metrics {
                line: self.next_step + 1,
                reason: format!("expected step {}, got {}", self.next_step, m.step),
            });
            return;
        }
        if let Err(e) = self.try_record(m) {
            self.failure = Some(LabError::Io {
                path: "<metrics stream>".into(),
                source: e,
            });
            return;
        }
        self.next_step += 1;
    }
}

/// Reads a metrics stream back, enforcing strictly increasing steps. A
/// missing file is reported as a missing artifact, not a bare IO error.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, LabError> {
    if !path.exists() {
        return Err(LabError::MissingArtifact {
            what: "metrics stream",
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(line).map_err(|e| LabError::Metrics {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some(prev) = records.last() {
            if record.step <= prev.step {
                return Err(LabError::Metrics {
                    line: i + 1,
                    reason: format!("step {} after step {}", record.step, prev.step),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// One stratum of a final evaluation, as stored on disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    /// Tasks evaluated.
    pub count: usize,
    /// Fraction answered correctly.
    pub accuracy: f64,
    /// Mean generated tokens per response.
    pub mean_generated: f64,
    /// Mean reasoning-span length per response.
    pub mean_think_body: f64,
    /// Fraction of responses that realized thinking (auto mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_rate: Option<f64>,
}

impl From<&StratumEval> for StratumReport {
    fn from(s: &StratumEval) -> Self {
        StratumReport {
            count: s.count,
            accuracy: s.accuracy,
            mean_generated: s.mean_generated,
            mean_think_body: s.mean_think_body,
            trigger_rate: s.trigger_rate,
        }
    }
}

/// One mode directive's final evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    /// Easy-stratum metrics.
    pub easy: StratumReport,
    /// Hard-stratum metrics.
    pub hard: StratumReport,
    /// Whole-suite metrics.
    pub overall: StratumReport,
}

impl From<&EvalFragment> for ModeReport {
    fn from(f: &EvalFragment) -> Self {
        ModeReport {
            easy: (&f.easy).into(),
            hard: (&f.hard).into(),
            overall: (&f.overall).into(),
        }
    }
}

/// All three mode directives evaluated for one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    /// Auto mode (the policy picks its own mode).
    pub auto: ModeReport,
    /// Forced thinking.
    pub thinking: ModeReport,
    /// Forced non-thinking.
    pub nonthinking: ModeReport,
}

impl From<&ProbeMetrics> for CheckpointEval {
    fn from(p: &ProbeMetrics) -> Self {
        CheckpointEval {
            auto: (&p.auto_mode).into(),
            thinking: (&p.forced_thinking).into(),
            nonthinking: (&p.forced_nonthinking).into(),
        }
    }
}

/// The final-evaluation document: both checkpoints on the same held-out
/// suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    /// The supervised warm-up checkpoint.
    pub post_sft: CheckpointEval,
    /// The reinforcement-learning checkpoint.
    pub post_rl: CheckpointEval,
}

/// Writes the final evaluation as pretty JSON.
pub fn write_final_eval(path: &Path, eval: &FinalEval) -> Result<(), LabError> {
    let mut text = serde_json::to_string_pretty(eval)?;
    text.push('\n');
    fs::write(path, text).map_err(io_at(path))
}

/// Reads a final evaluation back; missing file names the artifact.
pub fn read_final_eval(path: &Path) -> Result<FinalEval, LabError> {
    if !path.exists() {
        return Err(LabError::MissingArtifact {
            what: "final evaluation",
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpo_core::rollout::{StratumStats, TokenStats};

    fn step_metrics(step: usize, probe: Option<ProbeMetrics>) -> TrainStepMetrics {
        TrainStepMetrics {
            step,
            total: 0.5,
            surrogate: 0.51,
            kl: 1.0,
            clip_fraction: 0.125,
            reward_thinking: Some(0.75),
            reward_nonthinking: None,
            rollouts_thinking: 128,
            rollouts_nonthinking: 128,
            correct_thinking: 96,
            correct_nonthinking: 64,
            structural_violations: 0,
            batch_tokens: TokenStats {
                easy: StratumStats {
                    count: 10,
                    mean_generated: 4.0,
                    mean_think_body: 0.5,
                    auto_total: 0,
                    auto_thinking: 0,
                },
                hard: StratumStats {
                    count: 22,
                    mean_generated: 11.0,
                    mean_think_body: 6.0,
                    auto_total: 0,
                    auto_thinking: 0,
                },
                overall: StratumStats {
                    count: 32,
                    mean_generated: 8.8,
                    mean_think_body: 4.3,
                    auto_total: 0,
                    auto_thinking: 0,
                },
            },
            probe,
        }
    }

    #[test]
    fn probe_fields_are_absent_without_a_probe() {
        let record = MetricsRecord::from_step(&step_metrics(3, None), 32);
        assert_eq!(record.step, 3);
        assert_eq!(record.items_think, 3.0);
        assert_eq!(record.items_nothink, 2.0);
        assert!(!record.probed());
        let line = serde_json::to_string(&record).unwrap();
        assert!(!line.contains("trigger_rate"), "got: {line}");
        assert!(!line.contains("acc_auto"), "got: {line}");
        assert!(!line.contains("reward_nothink"), "absent means absent: {line}");
    }

    #[test]
    fn sink_writes_ordered_flushed_lines() {
        let mut sink = JsonlSink::new(Vec::new(), 32);
        sink.record(&step_metrics(0, None));
        sink.record(&step_metrics(1, None));
        let bytes = sink.finish().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: MetricsRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
    }

    #[test]
    fn sink_rejects_out_of_order_steps() {
        let mut sink = JsonlSink::new(Vec::new(), 32);
        sink.record(&step_metrics(0, None));
        sink.record(&step_metrics(2, None));
        let err = sink.finish().unwrap_err();
        assert!(err.to_string().contains("expected step 1"), "got: {err}");
    }

    #[test]
    fn stream_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let records: Vec<MetricsRecord> = (0..4)
            .map(|i| MetricsRecord::from_step(&step_metrics(i, None), 32))
            .collect();
        let text: String = records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        fs::write(&path, text).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), records);
    }

    #[test]
    fn reader_rejects_regressing_steps_and_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let a = serde_json::to_string(&MetricsRecord::from_step(&step_metrics(1, None), 32)).unwrap();
        let b = serde_json::to_string(&MetricsRecord::from_step(&step_metrics(1, None), 32)).unwrap();
        fs::write(&path, format!("{a}\n{b}\n")).unwrap();
        assert!(read_metrics(&path).is_err());
        fs::write(&path, "not json\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn missing_stream_is_a_named_artifact_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_metrics(&dir.path().join("metrics.jsonl")).unwrap_err();
        assert!(matches!(err, LabError::MissingArtifact { what: "metrics stream", .. }));
    }
}
