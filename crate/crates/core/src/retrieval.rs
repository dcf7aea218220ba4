//! Exact cosine top-N selection of in-context examples over fused features.
//!
//! Selection is an exhaustive scan in `f64`. Ranking is by descending score,
//! exact score ties going to the lexicographically smaller [`SampleId`], so the
//! same inputs always yield the same prompt.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Dataset, FeatureVector, SampleId};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("train pool is empty")]
    EmptyPool,
    #[error("number of examples must be at least 1")]
    ZeroRequested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub sample_id: SampleId,
    pub score: f64,
}

/// Ranked in-context examples chosen for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub query_id: Option<SampleId>,
    pub selected: Vec<ScoredId>,
    pub n_requested: usize,
}

impl SelectionResult {
    pub fn ids(&self) -> Vec<SampleId> {
        self.selected.iter().map(|s| s.sample_id.clone()).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn checked_norm(a: &[f64]) -> Result<f64, RetrievalError> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::NonFinite);
    }
    let n = norm(a);
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(RetrievalError::ZeroNorm)
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity_f64(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (checked_norm(a)?, checked_norm(b)?);
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64, RetrievalError> {
    cosine_similarity_f64(&a.to_f64(), &b.to_f64())
}

/// Descending score, then ascending id.
pub fn rank_order(a: &ScoredId, b: &ScoredId) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Candidate examples with widened vectors and cached norms.
#[derive(Debug, Clone)]
pub struct TrainPool {
    dim: usize,
    ids: Vec<SampleId>,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl TrainPool {
    /// The train split of `d`.
    pub fn from_dataset(d: &Dataset) -> Self {
        let entries = d.train().map(|s| (s.id.clone(), s.feature.to_f64()));
        // dataset invariants guarantee dims and norms
        Self::from_vectors(d.feature_dim(), entries).expect("validated dataset")
    }

    pub fn from_vectors(
        dim: usize,
        entries: impl IntoIterator<Item = (SampleId, Vec<f64>)>,
    ) -> Result<Self, RetrievalError> {
        let mut pool = Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
        };
        for (id, v) in entries {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    left: dim,
                    right: v.len(),
                });
            }
            pool.norms.push(checked_norm(&v)?);
            pool.vectors.extend_from_slice(&v);
            pool.ids.push(id);
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, id: &SampleId) -> bool {
        self.ids.contains(id)
    }

    fn scores(&self, query: &[f64]) -> Result<Vec<ScoredId>, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                left: query.len(),
                right: self.dim,
            });
        }
        let qn = checked_norm(query)?;
        Ok(self
            .ids
            .iter()
            .zip(self.vectors.chunks_exact(self.dim.max(1)))
            .zip(&self.norms)
            .map(|((id, v), vn)| ScoredId {
                sample_id: id.clone(),
                score: (dot(query, v) / (qn * vn)).clamp(-1.0, 1.0),
            })
            .collect())
    }
}

/// Top-`n` pool entries by cosine similarity to `query`.
///
/// Returns `min(n, pool.len())` entries in rank order.
pub fn select_examples(
    query: &[f64],
    pool: &TrainPool,
    n: usize,
) -> Result<SelectionResult, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::ZeroRequested);
    }
    if pool.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    let mut scored = pool.scores(query)?;
    let k = n.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(SelectionResult {
        query_id: None,
        selected: scored,
        n_requested: n,
    })
}

/// [`select_examples`] for a dataset sample, tagging the result with its id.
pub fn select_for_sample(
    d: &Dataset,
    pool: &TrainPool,
    query: &SampleId,
    n: usize,
) -> Result<Option<SelectionResult>, RetrievalError> {
    let Some(sample) = d.get(query) else {
        return Ok(None);
    };
    let mut r = select_examples(&sample.feature.to_f64(), pool, n)?;
    r.query_id = Some(query.clone());
    Ok(Some(r))
}
