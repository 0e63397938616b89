use serde::{Deserialize, Serialize};
use std::io::Write;

use super::metrics::{curve_auc, value_at_fraction};
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};
use crate::interventions::{run_dataset, Granularity, InterventionSource, InterventionTrace, Policy};
use crate::model::ConceptModel;

/// Task accuracy after each intervention step, averaged over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub accuracies: Vec<f64>,
    /// Mean probability of the true class after each step.
    pub mean_p_true: Vec<f64>,
    pub n_samples: usize,
    pub policy: String,
    pub source: String,
}

impl InterventionCurve {
    pub fn from_traces(traces: &[InterventionTrace], policy: &str, source: &str) -> Result<Self> {
        let first = traces.first().ok_or_else(|| CoreError::Undefined("curve over zero traces".into()))?;
        let steps = first.steps();
        if let Some(t) = traces.iter().find(|t| t.steps() != steps) {
            return Err(CoreError::Data(format!("trace `{}` has {} steps, expected {steps}", t.sample_id, t.steps())));
        }
        let n = traces.len() as f64;
        let accuracies = (0..steps)
            .map(|s| traces.iter().filter(|t| t.correct[s]).count() as f64 / n)
            .collect();
        let mean_p_true = (0..steps).map(|s| traces.iter().map(|t| t.p_true(s)).sum::<f64>() / n).collect();
        Ok(Self {
            accuracies,
            mean_p_true,
            n_samples: traces.len(),
            policy: policy.to_string(),
            source: source.to_string(),
        })
    }

    pub fn auc(&self) -> Result<f64> {
        curve_auc(&self.accuracies)
    }

    pub fn accuracy_at_fraction(&self, fraction: f64) -> Result<f64> {
        value_at_fraction(&self.accuracies, fraction)
    }

    /// CSV rows `step,accuracy,mean_p_true`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,accuracy,mean_p_true")?;
        for (s, (a, p)) in self.accuracies.iter().zip(&self.mean_p_true).enumerate() {
            writeln!(out, "{s},{a:e},{p:e}")?;
        }
        Ok(())
    }
}

pub fn intervention_curve(
    model: &ConceptModel,
    data: &ConceptDataset,
    policy: Policy,
    source: &InterventionSource,
    granularity: Granularity,
) -> Result<InterventionCurve> {
    let traces = run_dataset(model, data, source, policy, granularity)?;
    InterventionCurve::from_traces(&traces, policy.name(), &source.name)
}
