use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Area under the ROC curve in its Mann–Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreError::Data("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Undefined("ROC-AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives, counted in half-units to stay exact.
    let mut pos_rank2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&o| labels[o]).count() as u128;
        pos_rank2 += mid2 * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R_pos - p(p+1)/2, doubled
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Bin of `c` among `n` equal-width right-closed bins on `[0, 1]`; 0 falls in the first.
pub fn bin_index(c: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut b = ((c * nf).ceil() as usize).saturating_sub(1).min(n - 1);
    while b > 0 && c <= b as f64 / nf {
        b -= 1;
    }
    while b + 1 < n && c > (b + 1) as f64 / nf {
        b += 1;
    }
    b
}

/// Equal-width reliability bins and the expected calibration error
/// `Σ_b (n_b / N) · |acc_b − conf_b|`.
///
/// `outcomes` are usually 0/1 correctness flags; fractional reference values
/// in `[0, 1]` are accepted as well.
pub fn calibration_curve(confidences: &[f64], outcomes: &[f64], n_bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() {
        return Err(CoreError::Undefined("calibration of an empty prediction set".into()));
    }
    if confidences.len() != outcomes.len() {
        return Err(CoreError::Data(format!("{} confidences for {} outcomes", confidences.len(), outcomes.len())));
    }
    if n_bins == 0 {
        return Err(CoreError::Param("need at least one bin".into()));
    }
    if let Some(c) = confidences.iter().chain(outcomes).find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(CoreError::Data(format!("value {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut out_sum = vec![0.0; n_bins];
    for (&c, &o) in confidences.iter().zip(outcomes) {
        let b = bin_index(c, n_bins);
        count[b] += 1;
        conf_sum[b] += c;
        out_sum[b] += o;
    }
    let total = confidences.len() as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] > 0 {
                let n = count[b] as f64;
                let (conf, acc) = (conf_sum[b] / n, out_sum[b] / n);
                ece += n / total * (acc - conf).abs();
                (Some(conf), Some(acc))
            } else {
                (None, None)
            };
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok(CalibrationReport { n_bins, bins, ece })
}

pub fn ece(confidences: &[f64], outcomes: &[f64], n_bins: usize) -> Result<f64> {
    Ok(calibration_curve(confidences, outcomes, n_bins)?.ece)
}

/// Trapezoidal area under a curve sampled at evenly spaced steps, with the
/// step axis rescaled to `[0, 1]`.
pub fn curve_auc(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(CoreError::Param(format!("curve needs at least 2 points, got {}", values.len())));
    }
    let area: f64 = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(area / (values.len() - 1) as f64)
}

/// Value of a step curve at a fraction of the full intervention budget,
/// interpolating linearly between neighbouring steps.
pub fn value_at_fraction(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::Undefined("empty curve".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CoreError::Param(format!("fraction {fraction} outside [0, 1]")));
    }
    let pos = fraction * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let t = pos - lo as f64;
    Ok(values[lo] * (1.0 - t) + values[hi] * t)
}
