use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccuracyError {
    #[error("{predictions} prediction lists but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("sample {0} has an empty ranking")]
    EmptyRanking(usize),
    #[error("k must be at least 1")]
    ZeroK,
}

/// Fraction of samples whose label is among the first `k` ranked predictions.
pub fn topk_accuracy<P, S, L>(predictions: &[P], labels: &[L], k: usize) -> Result<f64, AccuracyError>
where
    P: AsRef<[S]>,
    S: AsRef<str>,
    L: AsRef<str>,
{
    if predictions.len() != labels.len() {
        return Err(AccuracyError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(AccuracyError::Empty);
    }
    if k == 0 {
        return Err(AccuracyError::ZeroK);
    }
    let mut hits = 0usize;
    for (i, (ranked, label)) in predictions.iter().zip(labels).enumerate() {
        let ranked = ranked.as_ref();
        if ranked.is_empty() {
            return Err(AccuracyError::EmptyRanking(i));
        }
        if ranked.iter().take(k).any(|p| p.as_ref() == label.as_ref()) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}
