//! Caption-to-keyword matching: build the query sentence from accepted
//! keywords, score every candidate caption embedding against the query
//! embedding by cosine similarity, and keep the first maximum.

use thiserror::Error;

use crate::domain::{CandidatePair, DomainError, Embedding, KeywordSequence, SelectionResult};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("no keywords to build a query from")]
    EmptyKeywords,
    #[error("no candidates")]
    NoCandidates,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("candidate {index}: {source}")]
    Candidate { index: usize, source: Box<SelectionError> },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Lowercased keywords joined by single spaces, in acceptance order.
pub fn build_query(keywords: &KeywordSequence) -> Result<String, SelectionError> {
    if keywords.is_empty() {
        return Err(SelectionError::EmptyKeywords);
    }
    Ok(keywords
        .keywords()
        .iter()
        .map(|k| k.trim().to_lowercase())
        .collect::<Vec<_>>()
        .join(" "))
}

/// `⟨u,v⟩ / (‖u‖·‖v‖)`, clamped into `[-1, 1]`.
///
/// The dot product and both squared norms are accumulated left to right.
pub fn cosine<T: Real>(u: &[T], v: &[T]) -> Result<T, SelectionError> {
    if u.len() != v.len() {
        return Err(SelectionError::DimMismatch { left: u.len(), right: v.len() });
    }
    let zero = T::zero();
    let dot = u.iter().zip(v).fold(zero, |acc, (&a, &b)| acc + a * b);
    let nu = u.iter().fold(zero, |acc, &a| acc + a * a).sqrt();
    let nv = v.iter().fold(zero, |acc, &b| acc + b * b).sqrt();
    if nu == zero || nv == zero {
        return Err(SelectionError::ZeroVector);
    }
    let one = T::one();
    Ok((dot / (nu * nv)).clamp(-one, one))
}

/// Index of the first maximum together with every score.
#[derive(Debug, Clone, PartialEq)]
pub struct Argmax<T> {
    pub index: usize,
    pub scores: Vec<T>,
}

/// Scores each candidate vector against `query`; ties go to the lowest index.
pub fn argmax_cosine<T, V>(candidates: &[V], query: &[T]) -> Result<Argmax<T>, SelectionError>
where
    T: Real,
    V: AsRef<[T]>,
{
    if candidates.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    let scores = candidates
        .iter()
        .enumerate()
        .map(|(index, c)| {
            cosine(c.as_ref(), query).map_err(|e| SelectionError::Candidate { index, source: Box::new(e) })
        })
        .collect::<Result<Vec<T>, _>>()?;
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(Argmax { index, scores })
}

/// Picks the candidate pair whose caption is closest to the query.
pub fn select(candidates: &[CandidatePair], query_embedding: &Embedding) -> Result<SelectionResult, SelectionError> {
    let vectors: Vec<&[f64]> = candidates.iter().map(|c| c.caption_embedding().as_slice()).collect();
    let Argmax { index, scores } = argmax_cosine(&vectors, query_embedding.as_slice())?;
    let chosen = &candidates[index];
    Ok(SelectionResult::new(index, chosen.image().image_id(), chosen.caption().text(), scores)?)
}

/// Copies each score onto its candidate.
pub fn apply_scores(candidates: Vec<CandidatePair>, selection: &SelectionResult) -> Result<Vec<CandidatePair>, SelectionError> {
    candidates
        .into_iter()
        .zip(selection.scores())
        .map(|(c, &s)| c.with_score(s).map_err(SelectionError::from))
        .collect()
}
