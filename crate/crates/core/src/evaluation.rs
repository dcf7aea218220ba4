//! Soft VQA accuracy.
//!
//! A prediction scores `min(matches / 3, 1)`, where `matches` is the number
//! of annotation entries equal to the prediction after [`normalize_answer`].
//! The formula is applied literally: there is no averaging over
//! leave-one-annotator-out subsets.
//!
//! Normalization rules, in order:
//!
//! 1. lowercase;
//! 2. delete ASCII punctuation (`stir-fry` becomes `stirfry`);
//! 3. trim and collapse internal whitespace runs to one space;
//! 4. drop leading `a` / `an` / `the` words while another word follows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{AnnotatedAnswers, Dataset, PredictionRecord, SampleId};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample has no annotations")]
    EmptyAnnotations,
    #[error("prediction for unknown sample `{0}`")]
    UnknownSample(SampleId),
    #[error("need at least two reports to compare, got {0}")]
    TooFewReports(usize),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    let lead = words
        .iter()
        .take_while(|w| ARTICLES.contains(w))
        .count()
        .min(words.len().saturating_sub(1));
    words.drain(..lead);
    words.join(" ")
}

/// Returns `(match_count, accuracy)`.
pub fn score_sample(predicted: &str, annotations: &AnnotatedAnswers) -> Result<(usize, f64), EvalError> {
    if annotations.is_empty() {
        return Err(EvalError::EmptyAnnotations);
    }
    let p = normalize_answer(predicted);
    let matches = if p.is_empty() {
        0
    } else {
        annotations
            .as_slice()
            .iter()
            .filter(|a| normalize_answer(a) == p)
            .count()
    };
    Ok((matches, accuracy_from_matches(matches)))
}

/// `min(matches / 3, 1)`; the four possible values are exact.
pub fn accuracy_from_matches(matches: usize) -> f64 {
    match matches {
        0 => 0.0,
        1 => 1.0 / 3.0,
        2 => 2.0 / 3.0,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: SampleId,
    pub predicted: String,
    pub match_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub per_sample: Vec<SampleScore>,
    pub mean_accuracy: f64,
    pub n_evaluated: usize,
    pub n_skipped: usize,
}

impl EvalReport {
    pub fn mean_pct(&self) -> f64 {
        self.mean_accuracy * 100.0
    }

    /// Per-sample JSON lines followed by one `{"summary": ...}` line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.per_sample {
            out.push_str(&serde_json::to_string(s).expect("serializable"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": {
                "dataset_name": self.dataset_name,
                "mean_accuracy": self.mean_accuracy,
                "accuracy_pct": format!("{:.1}", self.mean_pct()),
                "n_evaluated": self.n_evaluated,
                "n_skipped": self.n_skipped,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        #[derive(Deserialize)]
        struct SummaryLine {
            summary: Summary,
        }
        #[derive(Deserialize)]
        struct Summary {
            dataset_name: String,
            mean_accuracy: f64,
            n_evaluated: usize,
            n_skipped: usize,
        }
        let bad = |message: String| EvalError::File {
            path: "<report>".into(),
            message,
        };
        let mut per_sample = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(s) = serde_json::from_str::<SummaryLine>(line) {
                summary = Some(s.summary);
            } else {
                per_sample.push(
                    serde_json::from_str(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?,
                );
            }
        }
        let s = summary.ok_or_else(|| bad("missing summary line".into()))?;
        Ok(Self {
            dataset_name: s.dataset_name,
            per_sample,
            mean_accuracy: s.mean_accuracy,
            n_evaluated: s.n_evaluated,
            n_skipped: s.n_skipped,
        })
    }
}

/// Scores every prediction whose sample carries annotations; the rest are
/// counted as skipped. Per-sample rows come out in id order.
pub fn evaluate<'a>(
    predictions: impl IntoIterator<Item = &'a PredictionRecord>,
    d: &Dataset,
) -> Result<EvalReport, EvalError> {
    let mut by_id: BTreeMap<&SampleId, &PredictionRecord> = BTreeMap::new();
    for p in predictions {
        by_id.insert(&p.sample_id, p);
    }
    let mut per_sample = Vec::with_capacity(by_id.len());
    let mut n_skipped = 0;
    for (id, p) in by_id {
        let sample = d.get(id).ok_or_else(|| EvalError::UnknownSample(id.clone()))?;
        if sample.answers.is_empty() {
            n_skipped += 1;
            continue;
        }
        let (match_count, accuracy) = score_sample(&p.answer, &sample.answers)?;
        per_sample.push(SampleScore {
            sample_id: id.clone(),
            predicted: p.answer.clone(),
            match_count,
            accuracy,
        });
    }
    let n_evaluated = per_sample.len();
    let mean_accuracy = if n_evaluated == 0 {
        0.0
    } else {
        per_sample.iter().map(|s| s.accuracy).sum::<f64>() / n_evaluated as f64
    };
    Ok(EvalReport {
        dataset_name: d.name().to_owned(),
        per_sample,
        mean_accuracy,
        n_evaluated,
        n_skipped,
    })
}

/// Reads predictions from either a bare `PredictionRecord` per line or store
/// log lines carrying a `record` field. The last line for a sample wins.
pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    #[derive(Deserialize)]
    struct Wrapped {
        record: PredictionRecord,
    }
    let file_err = |message: String| EvalError::File {
        path: path.display().to_string(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| file_err(e.to_string()))?;
    let mut latest: BTreeMap<SampleId, PredictionRecord> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str::<PredictionRecord>(&line)
            .or_else(|_| serde_json::from_str::<Wrapped>(&line).map(|w| w.record))
            .map_err(|e| file_err(format!("line {}: {e}", i + 1)))?;
        latest.insert(rec.sample_id.clone(), rec);
    }
    Ok(latest.into_values().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub accuracy_pct: f64,
    pub delta_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,accuracy_pct,delta_pct\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.1},{:+.1}", r.variant, r.accuracy_pct, r.delta_pct);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.variant.chars().count())
            .chain(["variant".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<width$}  {:>8}  {:>7}\n", "variant", "accuracy", "delta");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.1}  {:>+7.1}",
                r.variant, r.accuracy_pct, r.delta_pct
            );
        }
        out
    }
}

/// Accuracy per variant with the delta against the first, in percentage points.
pub fn compare_runs(reports: &[(String, EvalReport)]) -> Result<ComparisonTable, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports(reports.len()));
    }
    let base = reports[0].1.mean_pct();
    Ok(ComparisonTable {
        rows: reports
            .iter()
            .map(|(variant, r)| ComparisonRow {
                variant: variant.clone(),
                accuracy_pct: r.mean_pct(),
                delta_pct: r.mean_pct() - base,
            })
            .collect(),
    })
}
