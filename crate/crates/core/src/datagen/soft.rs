//! Turning coarse or four-valued annotations into soft concept labels.

use serde::{Deserialize, Serialize};

use crate::annotation::{CoarseAnnotation, Confidence};
use crate::error::{CoreError, Result};

/// Four-valued label as found in radiology-style concept annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FourValue {
    Positive,
    Negative,
    Unknown,
    Uncertain,
}

impl std::str::FromStr for FourValue {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" | "1" | "1.0" => Ok(Self::Positive),
            "negative" | "neg" | "0" | "0.0" => Ok(Self::Negative),
            "unknown" | "" | "nan" => Ok(Self::Unknown),
            "uncertain" | "-1" | "-1.0" => Ok(Self::Uncertain),
            other => Err(CoreError::Data(format!("unrecognized label token `{other}`"))),
        }
    }
}

pub fn map_fourvalue(labels: &[FourValue], uncertain_value: f64, unknown_value: f64) -> Result<Vec<f64>> {
    for (name, v) in [("uncertain", uncertain_value), ("unknown", unknown_value)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::Param(format!("{name} value {v} outside [0, 1]")));
        }
    }
    Ok(labels
        .iter()
        .map(|l| match l {
            FourValue::Positive => 1.0,
            FourValue::Negative => 0.0,
            FourValue::Uncertain => uncertain_value,
            FourValue::Unknown => unknown_value,
        })
        .collect())
}

/// Parses string tokens, then maps them.
pub fn map_fourvalue_tokens(tokens: &[&str], uncertain_value: f64, unknown_value: f64) -> Result<Vec<f64>> {
    let labels = tokens.iter().map(|t| t.parse()).collect::<Result<Vec<FourValue>>>()?;
    map_fourvalue(&labels, uncertain_value, unknown_value)
}

/// Continuous confidence imputed for each discrete level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMap {
    pub guessing: f64,
    pub probably: f64,
    pub definitely: f64,
}

impl Default for ConfidenceMap {
    fn default() -> Self {
        Self {
            guessing: 0.5,
            probably: 0.7,
            definitely: 1.0,
        }
    }
}

impl ConfidenceMap {
    pub fn with_probably(probably: f64) -> Self {
        Self { probably, ..Self::default() }
    }

    pub fn rho(&self, omega: Confidence) -> f64 {
        match omega {
            Confidence::Guessing => self.guessing,
            Confidence::Probably => self.probably,
            Confidence::Definitely => self.definitely,
        }
    }
}

/// How the doubt of a coarse annotation spreads over the group's attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpreadMode {
    /// Every off-attribute receives `1 - ρ`.
    Broad,
    /// Only plausible off-attributes share `1 - ρ`; the rest stay at exactly 0.
    Narrow,
}

impl std::str::FromStr for SpreadMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "broad" => Ok(Self::Broad),
            "narrow" => Ok(Self::Narrow),
            other => Err(CoreError::Config(format!("unknown mode `{other}` (broad|narrow)"))),
        }
    }
}

pub fn coarse_to_soft(a: &CoarseAnnotation, gamma: &ConfidenceMap, mode: SpreadMode, plausible: Option<&[usize]>) -> Result<Vec<f64>> {
    let rho = gamma.rho(a.omega);
    if !(0.5..=1.0).contains(&rho) {
        return Err(CoreError::Config(format!("confidence {rho} for {:?} outside [0.5, 1]", a.omega)));
    }
    let on = |v: bool| if v { rho } else { 1.0 - rho };
    match mode {
        SpreadMode::Broad => Ok(a.on_bits.iter().map(|&b| on(b)).collect()),
        SpreadMode::Narrow => {
            let plausible = plausible.unwrap_or(&[]);
            if let Some(&bad) = plausible.iter().find(|&&j| j >= a.on_bits.len()) {
                return Err(CoreError::Config(format!("plausible attribute {bad} outside group of {}", a.on_bits.len())));
            }
            let mut off: Vec<usize> = plausible.iter().copied().filter(|&j| !a.on_bits[j]).collect();
            off.sort_unstable();
            off.dedup();
            let has_off = a.on_bits.iter().any(|b| !b);
            if off.is_empty() && rho < 1.0 && has_off {
                return Err(CoreError::Config("narrow mode needs at least one plausible off-attribute when confidence < 1".into()));
            }
            let mut out: Vec<f64> = a.on_bits.iter().map(|&b| if b { rho } else { 0.0 }).collect();
            if !off.is_empty() {
                let share = (1.0 - rho) / off.len() as f64;
                for j in off {
                    out[j] = share;
                }
            }
            Ok(out)
        }
    }
}

/// Attributes with non-zero frequency, the default plausible set for narrow mode.
pub fn plausible_from_frequencies(freq: &[f64]) -> Vec<usize> {
    freq.iter().enumerate().filter(|(_, &f)| f > 0.0).map(|(i, _)| i).collect()
}

/// Per-class mean of soft label vectors.
///
/// `annotations` pairs a class label with one annotator's soft vector. Every class
/// in `0..n_classes` must have at least one annotation.
pub fn aggregate_population(annotations: &[(usize, Vec<f64>)], n_classes: usize) -> Result<Vec<Vec<f64>>> {
    let width = annotations.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0; width]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (class, v) in annotations {
        if *class >= n_classes {
            return Err(CoreError::Data(format!("class {class} >= {n_classes}")));
        }
        if v.len() != width {
            return Err(CoreError::Data("soft vectors differ in length".into()));
        }
        counts[*class] += 1;
        sums[*class].iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(CoreError::Data(format!("class {empty} has no annotations")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect())
}
