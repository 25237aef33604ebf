//! The line-delimited curated-corpus file.
//!
//! One item per line, eight tab-separated fields:
//!
//! ```text
//! kind  steps  modulus  query  answer  label  source  target
//! ```
//!
//! Queries render compactly (`"2*3+4"` — the content alphabet is
//! single-character), while targets render as space-separated symbols
//! (`"<think> 6 0 </think> 0 <eos>"`) because they carry multi-character
//! framing tokens. The format round-trips exactly, so a corpus reloaded
//! from disk trains bit-identically to the one the curator handed over.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use bpo_core::anneal::{CurationItem, ModeLabel, SourceHeuristic};
use bpo_core::task::{TaskInstance, TaskKind};
use bpo_core::vocab::{Token, Vocab};

use crate::error::{io_at, LabError};

/// Comment line written at the top of every corpus file.
const HEADER: &str = "# kind\tsteps\tmodulus\tquery\tanswer\tlabel\tsource\ttarget";

/// The compact query rendering used as the task identity everywhere in the
/// harness: dedup keys, train/eval disjointness checks, and reports.
pub fn query_string(task: &TaskInstance, vocab: &Vocab) -> String {
    vocab.render(&task.query)
}

/// Formats one item as a corpus line (no trailing newline).
pub fn encode_item(item: &CurationItem, vocab: &Vocab) -> String {
    let kind = match item.task.kind {
        TaskKind::Objective => "objective",
        TaskKind::Subjective => "subjective",
    };
    let label = match item.label {
        ModeLabel::Reasoning => "reasoning",
        ModeLabel::Direct => "direct",
    };
    let source = match item.source {
        SourceHeuristic::Performance => "performance",
        SourceHeuristic::Difficulty => "difficulty",
    };
    let target = item
        .target
        .iter()
        .map(|&t| vocab.symbol(t))
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "{kind}\t{steps}\t{modulus}\t{query}\t{answer}\t{label}\t{source}\t{target}",
        steps = item.task.steps,
        modulus = item.task.modulus,
        query = query_string(&item.task, vocab),
        answer = vocab.symbol(item.task.answer),
    )
}

fn bad(line: usize, reason: impl Into<String>) -> LabError {
    LabError::Corpus {
        line,
        reason: reason.into(),
    }
}

/// Parses one corpus line (1-based `line` only labels errors).
pub fn decode_item(text: &str, line: usize, vocab: &Vocab) -> Result<CurationItem, LabError> {
    let fields: Vec<&str> = text.split('\t').collect();
    if fields.len() != 8 {
        return Err(bad(line, format!("expected 8 fields, found {}", fields.len())));
    }
    let kind = match fields[0] {
        "objective" => TaskKind::Objective,
        "subjective" => TaskKind::Subjective,
        other => return Err(bad(line, format!("unknown kind {other:?}"))),
    };
    let steps: u32 = fields[1]
        .parse()
        .map_err(|_| bad(line, format!("bad step count {:?}", fields[1])))?;
    let modulus: u32 = fields[2]
        .parse()
        .map_err(|_| bad(line, format!("bad modulus {:?}", fields[2])))?;
    let query: Vec<Token> = fields[3]
        .chars()
        .map(|c| {
            vocab
                .parse_symbol(&c.to_string())
                .ok_or_else(|| bad(line, format!("unknown query symbol {c:?}")))
        })
        .collect::<Result<_, _>>()?;
    let answer = vocab
        .parse_symbol(fields[4])
        .ok_or_else(|| bad(line, format!("unknown answer symbol {:?}", fields[4])))?;
    let label = match fields[5] {
        "reasoning" => ModeLabel::Reasoning,
        "direct" => ModeLabel::Direct,
        other => return Err(bad(line, format!("unknown label {other:?}"))),
    };
    let source = match fields[6] {
        "performance" => SourceHeuristic::Performance,
        "difficulty" => SourceHeuristic::Difficulty,
        other => return Err(bad(line, format!("unknown source {other:?}"))),
    };
    let target: Vec<Token> = fields[7]
        .split_whitespace()
        .map(|s| {
            vocab
                .parse_symbol(s)
                .ok_or_else(|| bad(line, format!("unknown target symbol {s:?}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(CurationItem {
        task: TaskInstance {
            query,
            answer,
            steps,
            kind,
            modulus,
        },
        label,
        target,
        source,
    })
}

/// Writes the whole corpus, header first, one item per line.
pub fn write_corpus(path: &Path, items: &[CurationItem], vocab: &Vocab) -> Result<(), LabError> {
    let mut out = String::with_capacity(64 * (items.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for item in items {
        out.push_str(&encode_item(item, vocab));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_at(path))
}

/// Reads a corpus file back. Blank lines and `#` comments are skipped.
pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<CurationItem>, LabError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut items = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim_end();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        items.push(decode_item(trimmed, i + 1, vocab)?);
    }
    Ok(items)
}

/// The set of query strings in a corpus — the identity set the held-out
/// suites must avoid.
pub fn corpus_queries(items: &[CurationItem], vocab: &Vocab) -> BTreeSet<String> {
    items
        .iter()
        .map(|i| query_string(&i.task, vocab))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use bpo_core::anneal::{build_item, curate_corpus, CurationConfig};
    use bpo_core::policy::{init_params, PolicyDims};
    use bpo_core::rng;
    use bpo_core::task::{sample_task, TaskSpec};

    fn demo_items(seed: u64) -> (Vec<CurationItem>, Vocab) {
        let vocab = Vocab::new();
        let dims = PolicyDims {
            vocab: 22,
            window: 12,
            embed: 6,
            hidden: 12,
        };
        let miner = init_params(seed, dims).unwrap();
        let spec = TaskSpec::default();
        let mut rng = rng::substream(seed, &[99]);
        let pool: Vec<_> = (0..40).map(|_| sample_task(&spec, &vocab, &mut rng)).collect();
        let (items, _) =
            curate_corpus(&pool, &miner, &CurationConfig::default(), &vocab, seed).unwrap();
        assert!(!items.is_empty());
        (items, vocab)
    }

    #[test]
    fn corpus_round_trips_exactly() {
        let (items, vocab) = demo_items(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        write_corpus(&path, &items, &vocab).unwrap();
        let back = read_corpus(&path, &vocab).unwrap();
        assert_eq!(items, back);
    }

    #[test]
    fn line_format_is_stable() {
        let vocab = Vocab::new();
        let query = vec![vocab.digit(4), vocab.plus(), vocab.digit(9)];
        let task = TaskInstance {
            answer: vocab.digit(3),
            steps: 1,
            kind: TaskKind::Objective,
            modulus: 10,
            query,
        };
        let item = build_item(&task, ModeLabel::Direct, SourceHeuristic::Performance, &vocab);
        assert_eq!(
            encode_item(&item, &vocab),
            "objective\t1\t10\t4+9\t3\tdirect\tperformance\t<think> </think> 3 <eos>"
        );
    }

    #[test]
    fn malformed_lines_name_their_line_number() {
        let vocab = Vocab::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        fs::write(&path, "# header\nobjective\t1\t10\t4+9\t3\tdirect\n").unwrap();
        let err = read_corpus(&path, &vocab).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn unknown_symbols_are_rejected() {
        let vocab = Vocab::new();
        let line = "objective\t1\t10\t4q9\t3\tdirect\tperformance\t<think> </think> 3 <eos>";
        assert!(decode_item(line, 1, &vocab).is_err());
        let line = "objective\t1\t10\t4+9\t3\tdirect\tperformance\t<thunk> </think> 3 <eos>";
        assert!(decode_item(line, 1, &vocab).is_err());
    }

    #[test]
    fn query_set_matches_items() {
        let (items, vocab) = demo_items(4);
        let set = corpus_queries(&items, &vocab);
        assert!(set.len() <= items.len());
        assert!(items
            .iter()
            .all(|i| set.contains(&query_string(&i.task, &vocab))));
    }
}
