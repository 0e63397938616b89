use super::network::ConceptModel;
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};

/// Fraction of unmasked concepts where prediction and target fall on the same
/// side of `threshold` (values `>= threshold` count as on).
pub fn concept_accuracy_from(preds: &[Vec<f64>], targets: &[Vec<f64>], masks: &[Vec<bool>], threshold: f64) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((p, t), m) in preds.iter().zip(targets).zip(masks) {
        for ((&p, &t), &m) in p.iter().zip(t).zip(m) {
            if m {
                total += 1;
                hits += usize::from((p >= threshold) == (t >= threshold));
            }
        }
    }
    if total == 0 {
        return Err(CoreError::Undefined("no annotated concepts to score".into()));
    }
    Ok(hits as f64 / total as f64)
}

pub fn concept_accuracy(model: &ConceptModel, data: &ConceptDataset, threshold: f64) -> Result<f64> {
    let out = model.predict_dataset(data)?;
    let preds: Vec<Vec<f64>> = (0..data.len()).map(|i| out.concept_probs.row(i).to_vec()).collect();
    concept_accuracy_from(&preds, &data.concepts, &data.masks, threshold)
}

pub fn task_accuracy(model: &ConceptModel, data: &ConceptDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(CoreError::Undefined("task accuracy of an empty dataset".into()));
    }
    let out = model.predict_dataset(data)?;
    let hits = (0..data.len()).filter(|&i| out.predicted_class(i) == data.labels[i]).count();
    Ok(hits as f64 / data.len() as f64)
}
