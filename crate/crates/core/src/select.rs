//! Scored candidate sets and the argmax used at every reflective selection point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("score at index {index} is not finite ({value})")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("expected {expected} scores, got {actual}")]
    ScoreCountMismatch { expected: usize, actual: usize },
    #[error("candidate set has no scores assigned")]
    Unscored,
}

fn check_finite(scores: &[f64]) -> Result<(), SelectError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(index) => Err(SelectError::NonFiniteScore {
            index,
            value: scores[index],
        }),
        None => Ok(()),
    }
}

/// Index of the maximum score; ties resolve to the smallest index.
pub fn select_argmax(scores: &[f64]) -> Result<usize, SelectError> {
    if scores.is_empty() {
        return Err(SelectError::EmptyCandidates);
    }
    check_finite(scores)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// The `k` best indices ordered by (score desc, index asc).
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>, SelectError> {
    if scores.is_empty() {
        return Err(SelectError::EmptyCandidates);
    }
    check_finite(scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
    order.truncate(k);
    Ok(order)
}

/// Where a candidate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate<T> {
    pub index: usize,
    pub payload: T,
    pub score: Option<f64>,
    pub provenance: Provenance,
}

/// Ordered candidates with contiguous indices starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet<T> {
    items: Vec<Candidate<T>>,
}

impl<T> Default for CandidateSet<T> {
    fn default() -> Self {
        Self { items: Vec::new() }
    }
}

impl<T> CandidateSet<T> {
    pub fn from_payloads(
        payloads: impl IntoIterator<Item = (T, Provenance)>,
    ) -> Self {
        let items = payloads
            .into_iter()
            .enumerate()
            .map(|(index, (payload, provenance))| Candidate {
                index,
                payload,
                score: None,
                provenance,
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Candidate<T>> {
        self.items.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Candidate<T>> {
        self.items.get(index)
    }

    pub fn payloads(&self) -> impl Iterator<Item = &T> {
        self.items.iter().map(|c| &c.payload)
    }

    /// Assigns judge scores in candidate order. Non-finite scores are rejected
    /// and leave the set untouched.
    pub fn assign_scores(&mut self, scores: &[f64]) -> Result<(), SelectError> {
        if scores.len() != self.items.len() {
            return Err(SelectError::ScoreCountMismatch {
                expected: self.items.len(),
                actual: scores.len(),
            });
        }
        check_finite(scores)?;
        for (item, s) in self.items.iter_mut().zip(scores) {
            item.score = Some(*s);
        }
        Ok(())
    }

    /// Scores in order, or `None` if any candidate is unscored.
    pub fn scores(&self) -> Option<Vec<f64>> {
        self.items.iter().map(|c| c.score).collect()
    }

    pub fn select(&self) -> Result<usize, SelectError> {
        if self.items.is_empty() {
            return Err(SelectError::EmptyCandidates);
        }
        let scores = self.scores().ok_or(SelectError::Unscored)?;
        select_argmax(&scores)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> CandidateSet<U> {
        CandidateSet {
            items: self
                .items
                .iter()
                .map(|c| Candidate {
                    index: c.index,
                    payload: f(&c.payload),
                    score: c.score,
                    provenance: c.provenance.clone(),
                })
                .collect(),
        }
    }
}
