//! Domain types, dataset ingestion and validation.
//!
//! A dataset arrives as two files joined on [`SampleId`]:
//!
//! * a samples file, one JSON object per line with `id`, `split`, `caption`,
//!   `question` and `answers`;
//! * a features file, either line-delimited `{id, vector}` JSON or the
//!   `PLRHFV1` binary layout (magic, `u32` count, `u32` dim, then per record a
//!   `u16`-length-prefixed UTF-8 id followed by `dim` little-endian `f32`s).
//!
//! Vectors are stored as `f32` regardless of source so that both feature
//! forms load to identical datasets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::ContentHasher;

/// Magic prefix of the binary features file.
pub const FEATURES_MAGIC: &[u8; 8] = b"PLRHFV1\n";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: sample `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        path: PathBuf,
        line: usize,
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: feature vector for `{id}` has zero norm")]
    ZeroNorm { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: feature vector for `{id}` has a non-finite value")]
    NonFinite { path: PathBuf, line: usize, id: String },
    #[error("no feature vector for sample `{id}` (samples line {line})")]
    MissingFeature { id: String, line: usize },
    #[error("invalid sample id: {0:?}")]
    InvalidId(String),
    #[error("invalid feature vector: {0}")]
    InvalidVector(&'static str),
    #[error("dataset failed validation: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

/// Identifier of one dataset record. Never empty or whitespace-only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SampleId(String);

impl SampleId {
    pub fn new(value: impl Into<String>) -> Result<Self, DataError> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(DataError::InvalidId(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SampleId {
    type Error = DataError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SampleId> for String {
    fn from(id: SampleId) -> Self {
        id.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Human answer annotations in their original order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotatedAnswers(Vec<String>);

impl AnnotatedAnswers {
    pub fn new(answers: Vec<String>) -> Self {
        Self(answers)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// The gold answer used when a sample appears as an in-context example:
    /// the most frequent annotation (exact string match after trimming),
    /// ties going to the one annotated first.
    pub fn most_frequent(&self) -> Option<&str> {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, answer) in self.0.iter().enumerate() {
            let entry = counts.entry(answer.trim()).or_insert((0, pos));
            entry.0 += 1;
        }
        counts
            .into_iter()
            .filter(|(a, _)| !a.is_empty())
            .max_by(|(_, (ca, pa)), (_, (cb, pb))| ca.cmp(cb).then(pb.cmp(pa)))
            .map(|(a, _)| a)
    }
}

/// A precomputed fused image-question feature. Finite values, norm > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f32>,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::InvalidVector("empty vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidVector("non-finite value"));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(DataError::InvalidVector("zero norm"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub split: Split,
    pub caption: String,
    pub question: String,
    pub answers: AnnotatedAnswers,
    pub feature: FeatureVector,
}

/// An immutable, id-sorted collection of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset and rejects it if [`validate_dataset`] finds anything.
    pub fn new(
        name: impl Into<String>,
        feature_dim: usize,
        samples: Vec<Sample>,
    ) -> Result<Self, DataError> {
        let dataset = Self::from_parts_unchecked(name, feature_dim, samples);
        let violations = validate_dataset(&dataset);
        if violations.is_empty() {
            Ok(dataset)
        } else {
            Err(DataError::Invalid(violations))
        }
    }

    /// Builds a dataset without validation. Samples are still sorted by id.
    pub fn from_parts_unchecked(
        name: impl Into<String>,
        feature_dim: usize,
        mut samples: Vec<Sample>,
    ) -> Self {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            name: name.into(),
            feature_dim,
            samples,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All samples in ascending id order.
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: &SampleId) -> Option<&Sample> {
        self.samples
            .binary_search_by(|s| s.id.cmp(id))
            .ok()
            .map(|i| &self.samples[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.split(Split::Test)
    }

    /// Hash over every field of every sample, independent of input file order
    /// and of which feature file form was loaded.
    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        h.update((self.feature_dim as u64).to_le_bytes());
        for s in &self.samples {
            let header = serde_json::json!({
                "id": s.id,
                "split": s.split,
                "caption": s.caption,
                "question": s.question,
                "answers": s.answers,
            });
            h.update(header.to_string()).update([0u8]);
            for v in s.feature.values() {
                h.update(v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// One rule broken by one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub sample_id: SampleId,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    EmptyCaption,
    EmptyQuestion,
    TrainWithoutAnswers,
    BlankAnswer { index: usize },
    DimensionMismatch { expected: usize, found: usize },
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::DuplicateId => f.write_str("id is not unique"),
            Rule::EmptyCaption => f.write_str("caption is empty"),
            Rule::EmptyQuestion => f.write_str("question is empty"),
            Rule::TrainWithoutAnswers => f.write_str("train sample has no answers"),
            Rule::BlankAnswer { index } => write!(f, "answer #{index} is blank"),
            Rule::DimensionMismatch { expected, found } => {
                write!(f, "feature dim {found}, dataset dim {expected}")
            }
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sample `{}`: {}", self.sample_id, self.rule)
    }
}

/// Lists every invariant violation. An empty list means the dataset is valid.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |id: &SampleId, rule| {
        out.push(Violation {
            sample_id: id.clone(),
            rule,
        })
    };
    for (i, s) in d.samples.iter().enumerate() {
        // samples are id-sorted, so duplicates are adjacent; report each extra copy once
        if i > 0 && d.samples[i - 1].id == s.id {
            push(&s.id, Rule::DuplicateId);
        }
        if s.caption.trim().is_empty() {
            push(&s.id, Rule::EmptyCaption);
        }
        if s.question.trim().is_empty() {
            push(&s.id, Rule::EmptyQuestion);
        }
        if s.split == Split::Train && s.answers.is_empty() {
            push(&s.id, Rule::TrainWithoutAnswers);
        }
        for (index, a) in s.answers.as_slice().iter().enumerate() {
            if a.trim().is_empty() {
                push(&s.id, Rule::BlankAnswer { index });
            }
        }
        if s.feature.dim() != d.feature_dim {
            push(
                &s.id,
                Rule::DimensionMismatch {
                    expected: d.feature_dim,
                    found: s.feature.dim(),
                },
            );
        }
    }
    out
}

#[derive(Deserialize)]
struct SampleLine {
    id: String,
    split: Split,
    caption: String,
    question: String,
    #[serde(default)]
    answers: Vec<String>,
}

/// A parsed samples-file row before it is joined with its feature.
#[derive(Debug, Clone)]
pub struct SampleRow {
    pub line: usize,
    pub id: SampleId,
    pub split: Split,
    pub caption: String,
    pub question: String,
    pub answers: AnnotatedAnswers,
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Reads a samples file. Blank lines are ignored.
pub fn read_samples(path: &Path) -> Result<Vec<SampleRow>, DataError> {
    let reader = BufReader::new(open(path)?);
    let mut rows = Vec::new();
    let mut seen: HashMap<SampleId, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DataError::Malformed {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let raw: SampleLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let id = SampleId::new(raw.id).map_err(|e| malformed(e.to_string()))?;
        if seen.insert(id.clone(), line_no).is_some() {
            return Err(DataError::DuplicateId {
                path: path.to_owned(),
                line: line_no,
                id: id.0,
            });
        }
        rows.push(SampleRow {
            line: line_no,
            id,
            split: raw.split,
            caption: raw.caption,
            question: raw.question,
            answers: AnnotatedAnswers(raw.answers),
        });
    }
    Ok(rows)
}

/// Feature vectors keyed by id, plus the dimension shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub vectors: BTreeMap<SampleId, FeatureVector>,
}

#[derive(Deserialize)]
struct FeatureLine {
    id: String,
    vector: Vec<f64>,
}

/// Reads a features file in either form, sniffing the binary magic.
pub fn read_features(path: &Path) -> Result<FeatureTable, DataError> {
    let mut file = BufReader::new(open(path)?);
    let head = file.fill_buf().map_err(io_err(path))?;
    if head.starts_with(FEATURES_MAGIC) {
        read_features_binary(path, file)
    } else {
        read_features_text(path, file)
    }
}

struct FeatureSink<'a> {
    path: &'a Path,
    table: FeatureTable,
}

impl FeatureSink<'_> {
    fn insert(&mut self, line: usize, id: SampleId, values: Vec<f32>) -> Result<(), DataError> {
        let path = self.path.to_owned();
        if values.len() != self.table.dim {
            return Err(DataError::DimensionMismatch {
                path,
                line,
                id: id.0,
                expected: self.table.dim,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { path, line, id: id.0 });
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(DataError::ZeroNorm { path, line, id: id.0 });
        }
        if self.table.vectors.contains_key(&id) {
            return Err(DataError::DuplicateId { path, line, id: id.0 });
        }
        self.table.vectors.insert(id, FeatureVector { values });
        Ok(())
    }
}

fn read_features_text(path: &Path, reader: impl BufRead) -> Result<FeatureTable, DataError> {
    let mut sink: Option<FeatureSink> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| DataError::Malformed {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let raw: FeatureLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let id = SampleId::new(raw.id).map_err(|e| malformed(e.to_string()))?;
        // narrowing to f32 makes text and binary forms load identically
        let values: Vec<f32> = raw.vector.iter().map(|&v| v as f32).collect();
        if values.is_empty() {
            return Err(malformed("empty vector".into()));
        }
        let sink = sink.get_or_insert_with(|| FeatureSink {
            path,
            table: FeatureTable {
                dim: values.len(),
                vectors: BTreeMap::new(),
            },
        });
        sink.insert(line_no, id, values)?;
    }
    sink.map(|s| s.table).ok_or_else(|| DataError::Malformed {
        path: path.to_owned(),
        line: 0,
        message: "features file contains no records".into(),
    })
}

fn read_features_binary(path: &Path, mut reader: impl Read) -> Result<FeatureTable, DataError> {
    let truncated = |record: usize| DataError::Malformed {
        path: path.to_owned(),
        line: record,
        message: "truncated binary features file".into(),
    };
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|_| truncated(0))?;
    let mut u32buf = [0u8; 4];
    reader.read_exact(&mut u32buf).map_err(|_| truncated(0))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    reader.read_exact(&mut u32buf).map_err(|_| truncated(0))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 {
        return Err(DataError::Malformed {
            path: path.to_owned(),
            line: 0,
            message: "dimension is zero".into(),
        });
    }
    let mut sink = FeatureSink {
        path,
        table: FeatureTable {
            dim,
            vectors: BTreeMap::new(),
        },
    };
    let mut floats = vec![0u8; dim * 4];
    for record in 1..=count {
        let mut len = [0u8; 2];
        reader.read_exact(&mut len).map_err(|_| truncated(record))?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        reader.read_exact(&mut id).map_err(|_| truncated(record))?;
        let malformed = |message: String| DataError::Malformed {
            path: path.to_owned(),
            line: record,
            message,
        };
        let id = String::from_utf8(id).map_err(|e| malformed(e.to_string()))?;
        let id = SampleId::new(id).map_err(|e| malformed(e.to_string()))?;
        reader.read_exact(&mut floats).map_err(|_| truncated(record))?;
        let values = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        sink.insert(record, id, values)?;
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(io_err(path))? != 0 {
        return Err(DataError::Malformed {
            path: path.to_owned(),
            line: count,
            message: "trailing bytes after last record".into(),
        });
    }
    Ok(sink.table)
}

/// Writes features in the binary form, records in the given order.
pub fn write_features_binary<'a>(
    path: &Path,
    dim: usize,
    records: impl ExactSizeIterator<Item = (&'a SampleId, &'a [f32])>,
) -> Result<(), DataError> {
    let err = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&err)?);
    let count = u32::try_from(records.len()).map_err(|_| DataError::InvalidVector("too many records"))?;
    let dim32 = u32::try_from(dim).map_err(|_| DataError::InvalidVector("dimension too large"))?;
    w.write_all(FEATURES_MAGIC).map_err(&err)?;
    w.write_all(&count.to_le_bytes()).map_err(&err)?;
    w.write_all(&dim32.to_le_bytes()).map_err(&err)?;
    for (id, values) in records {
        if values.len() != dim {
            return Err(DataError::InvalidVector("record dimension differs from header"));
        }
        let len = u16::try_from(id.as_str().len()).map_err(|_| DataError::InvalidId(id.0.clone()))?;
        w.write_all(&len.to_le_bytes()).map_err(&err)?;
        w.write_all(id.as_str().as_bytes()).map_err(&err)?;
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)
}

/// Writes features in the line-delimited text form.
pub fn write_features_text<'a>(
    path: &Path,
    records: impl Iterator<Item = (&'a SampleId, &'a [f32])>,
) -> Result<(), DataError> {
    let err = io_err(path);
    let mut w = BufWriter::new(File::create(path).map_err(&err)?);
    for (id, values) in records {
        let line = serde_json::json!({ "id": id, "vector": values });
        writeln!(w, "{line}").map_err(&err)?;
    }
    w.flush().map_err(&err)
}

/// Reads only the samples file, for scoring. Features are left empty and the
/// dataset is not validated.
pub fn load_annotations(samples_path: &Path) -> Result<Dataset, DataError> {
    let samples = read_samples(samples_path)?
        .into_iter()
        .map(|r| Sample {
            id: r.id,
            split: r.split,
            caption: r.caption,
            question: r.question,
            answers: r.answers,
            feature: FeatureVector { values: Vec::new() },
        })
        .collect();
    Ok(Dataset::from_parts_unchecked(dataset_name(samples_path), 0, samples))
}

/// Loads and joins a samples file with its features file, then validates.
///
/// Features for ids absent from the samples file are ignored with a warning.
pub fn load_dataset(samples_path: &Path, features_path: &Path) -> Result<Dataset, DataError> {
    let rows = read_samples(samples_path)?;
    let mut features = read_features(features_path)?;
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        let feature = features
            .vectors
            .remove(&row.id)
            .ok_or_else(|| DataError::MissingFeature {
                id: row.id.0.clone(),
                line: row.line,
            })?;
        samples.push(Sample {
            id: row.id,
            split: row.split,
            caption: row.caption,
            question: row.question,
            answers: row.answers,
            feature,
        });
    }
    if !features.vectors.is_empty() {
        log::warn!(
            "{}: {} feature rows have no matching sample",
            features_path.display(),
            features.vectors.len()
        );
    }
    Dataset::new(dataset_name(samples_path), features.dim, samples)
}

fn dataset_name(samples_path: &Path) -> String {
    samples_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleStage {
    TrainRationale,
    TestRationale,
}

/// A generated rationale bound to the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub sample_id: SampleId,
    pub stage: RationaleStage,
    pub rationale: String,
    pub prompt_hash: String,
    pub model_id: String,
    pub created_at: DateTime<Utc>,
    /// Selected in-context example ids in ranking order. Empty for train rationales.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub example_ids: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: SampleId,
    pub answer: String,
    pub rationale_used: Option<String>,
    pub example_ids: Vec<SampleId>,
    pub prompt_hash: String,
    pub model_id: String,
}
