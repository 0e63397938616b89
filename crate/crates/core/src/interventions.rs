//! Test-time concept interventions: value sources, Random and Skyline
//! policies, and per-sample traces.
//!
//! A *unit* is what a policy selects at each step: a single concept, or a
//! whole concept group whose attributes are set together.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;

use softcbm_tensor::{linalg, Tensor};

use crate::annotation::{CoarseAnnotation, SoftGroupAnnotation};
use crate::dataset::ConceptDataset;
use crate::datagen::soft::{coarse_to_soft, ConfidenceMap, SpreadMode};
use crate::datagen::umnist::noise_concept;
use crate::error::{CoreError, Result};
use crate::model::{ConceptModel, Interventions};
use crate::rng::SeedStream;
use crate::schema::ConceptGroupSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Concept,
    Group,
}

impl std::str::FromStr for Granularity {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(Granularity::Concept),
            "group" => Ok(Granularity::Group),
            other => Err(CoreError::Config(format!("unknown granularity `{other}` (expected concept or group)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Policy {
    /// Uniformly random order; sample `i` uses stream `i` of `seed`.
    Random { seed: u64 },
    /// Greedy oracle: each step takes the unit that most raises `p(y_true)`.
    Skyline,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Random { .. } => "random",
            Policy::Skyline => "skyline",
        }
    }
}

/// The values a human would supply when asked about each concept.
///
/// `values[s][i]` is `None` when nothing was expressed for concept `i` of
/// sample `s`. A unit whose concepts are all `None` is *blank*: Random defers
/// it to the end and Skyline scores it as a no-op; applying it changes nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSource {
    pub name: String,
    pub values: Vec<Vec<Option<f64>>>,
}

impl InterventionSource {
    pub fn new(name: impl Into<String>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        for (s, row) in values.iter().enumerate() {
            if let Some(v) = row.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CoreError::Data(format!("sample {s}: intervention value {v} outside [0, 1]")));
            }
        }
        Ok(Self { name: name.into(), values })
    }

    /// The dataset's own concept values, whether hard or noised.
    pub fn from_dataset(name: impl Into<String>, data: &ConceptDataset) -> Result<Self> {
        Self::new(name, data.concepts.iter().map(|c| c.iter().map(|&v| Some(v)).collect()).collect())
    }

    /// Hard bits (thresholded at 0.5) passed through the uniform noise model with width `delta`.
    pub fn noised(bits: &[Vec<f64>], delta: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(CoreError::Param(format!("delta {delta} outside [0, 1]")));
        }
        let mut rng = SeedStream::derive(seed, 0x401e);
        let values = bits
            .iter()
            .map(|row| row.iter().map(|&b| Some(noise_concept(b >= 0.5, delta, &mut rng))).collect())
            .collect();
        Self::new(format!("noised(delta={delta})"), values)
    }

    /// Soft values from one coarse annotation per group per sample.
    pub fn from_coarse(
        schema: &ConceptGroupSchema,
        coarse: &[Vec<CoarseAnnotation>],
        gamma: &ConfidenceMap,
        mode: SpreadMode,
        plausible: &dyn Fn(usize, usize) -> Option<Vec<usize>>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(coarse.len());
        for (s, anns) in coarse.iter().enumerate() {
            let mut row = vec![None; schema.k()];
            for a in anns {
                if a.group >= schema.n_groups() {
                    return Err(CoreError::Data(format!("sample {s}: group {} out of range", a.group)));
                }
                let pl = plausible(s, a.group);
                let soft = coarse_to_soft(a, gamma, mode, pl.as_deref())?;
                let range = schema.group_range(a.group);
                if soft.len() != range.len() {
                    return Err(CoreError::Data(format!("sample {s}: annotation for group {} has wrong width", a.group)));
                }
                for (j, v) in range.zip(soft) {
                    row[j] = Some(v);
                }
            }
            values.push(row);
        }
        Self::new(format!("coarse({mode:?}, probably={})", gamma.probably), values)
    }

    /// Each sample receives the aggregated vector of its class.
    pub fn from_population(per_class: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let values = labels
            .iter()
            .map(|&y| {
                per_class
                    .get(y)
                    .map(|v| v.iter().map(|&x| Some(x)).collect())
                    .ok_or_else(|| CoreError::Data(format!("no population label for class {y}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new("population", values)
    }

    /// Elicited masses (`mass / 100`). Groups without an annotation, or whose
    /// annotation carries no mass at all, are left blank.
    pub fn from_elicited(data: &ConceptDataset, annotations: &[SoftGroupAnnotation]) -> Result<Self> {
        let index: HashMap<&str, usize> = data.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut values = vec![vec![None; data.k()]; data.len()];
        for a in annotations {
            let Some(&s) = index.get(a.stimulus_id.as_str()) else { continue };
            if a.total_mass() == 0 {
                continue;
            }
            let g = data
                .schema
                .group_index(&a.group_id)
                .ok_or_else(|| CoreError::Data(format!("unknown group `{}`", a.group_id)))?;
            for j in data.schema.group_range(g) {
                values[s][j] = Some(0.0);
            }
            for (j, v) in a.concept_values(&data.schema)? {
                values[s][j] = Some(v.min(1.0));
            }
        }
        Self::new("elicited", values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Concept index lists of every unit under `granularity`.
pub fn units(k: usize, granularity: Granularity, schema: Option<&ConceptGroupSchema>) -> Result<Vec<Vec<usize>>> {
    match granularity {
        Granularity::Concept => Ok((0..k).map(|i| vec![i]).collect()),
        Granularity::Group => {
            let schema = schema.ok_or_else(|| CoreError::Config("group interventions need a concept-group schema".into()))?;
            if schema.k() != k {
                return Err(CoreError::Config(format!("schema has {} concepts, model {k}", schema.k())));
            }
            Ok((0..schema.n_groups()).map(|g| schema.group_range(g).collect()).collect())
        }
    }
}

fn apply_unit(current: &mut Interventions, unit: &[usize], values: &[Option<f64>]) {
    for &i in unit {
        if let Some(v) = values[i] {
            current.insert(i, v);
        }
    }
}

fn is_blank(unit: &[usize], values: &[Option<f64>]) -> bool {
    unit.iter().all(|&i| values[i].is_none())
}

/// Uniform draw from `remaining`.
pub fn next_random(remaining: &[usize], rng: &mut SeedStream) -> Result<usize> {
    if remaining.is_empty() {
        return Err(CoreError::State("no units left to intervene on".into()));
    }
    Ok(remaining[rng.below(remaining.len())])
}

/// Skyline choice among `remaining` for one sample given its encoded features
/// (`[1, width]`). Returns the unit and the `p(y_true)` it achieves.
/// Ties go to the lowest unit index.
pub fn next_skyline(
    model: &ConceptModel,
    features: &Tensor,
    current: &Interventions,
    values: &[Option<f64>],
    units: &[Vec<usize>],
    remaining: &[usize],
    y_true: usize,
) -> Result<(usize, f64)> {
    if remaining.is_empty() {
        return Err(CoreError::State("no units left to intervene on".into()));
    }
    let maps: Vec<Interventions> = remaining
        .iter()
        .map(|&u| {
            let mut m = current.clone();
            apply_unit(&mut m, &units[u], values);
            m
        })
        .collect();
    let rows = Tensor::stack(&vec![features.clone(); maps.len()])?.reshape(vec![maps.len(), features.len()])?;
    let out = model.forward_encoded(&rows, &maps)?;
    let mut best: Option<(usize, f64)> = None;
    for (r, &u) in remaining.iter().enumerate() {
        let p = out.class_probs(r)[y_true];
        let better = match best {
            None => true,
            Some((bu, bp)) => p > bp || (p == bp && u < bu),
        };
        if better {
            best = Some((u, p));
        }
    }
    Ok(best.expect("remaining is nonempty"))
}

/// Step-by-step record of one sample's interventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTrace {
    pub sample_id: String,
    pub y_true: usize,
    /// Unit chosen at steps `1..`; step 0 has none.
    pub units: Vec<usize>,
    /// Class probabilities after each step, step 0 first.
    pub probs: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub correct: Vec<bool>,
}

impl InterventionTrace {
    pub fn p_true(&self, step: usize) -> f64 {
        self.probs[step][self.y_true]
    }

    pub fn steps(&self) -> usize {
        self.probs.len()
    }
}

/// Runs a policy to exhaustion on one sample.
///
/// `features` is the sample's encoded backbone output (`[1, width]`), so the
/// backbone runs once per sample however many steps are taken.
#[allow(clippy::too_many_arguments)]
pub fn run_policy(
    model: &ConceptModel,
    features: &Tensor,
    sample_id: &str,
    y_true: usize,
    values: &[Option<f64>],
    policy: Policy,
    units: &[Vec<usize>],
    rng: &mut SeedStream,
) -> Result<InterventionTrace> {
    if values.len() != model.k() {
        return Err(CoreError::Data(format!("source covers {} concepts, model has {}", values.len(), model.k())));
    }
    if y_true >= model.n_classes() {
        return Err(CoreError::Data(format!("label {y_true} out of range")));
    }
    let mut trace = InterventionTrace {
        sample_id: sample_id.to_string(),
        y_true,
        units: Vec::with_capacity(units.len()),
        probs: Vec::with_capacity(units.len() + 1),
        predicted: Vec::with_capacity(units.len() + 1),
        correct: Vec::with_capacity(units.len() + 1),
    };
    let mut current = Interventions::new();
    let record = |trace: &mut InterventionTrace, current: &Interventions| -> Result<()> {
        let out = model.forward_encoded(features, std::slice::from_ref(current))?;
        let probs = out.class_probs(0);
        let pred = linalg::argmax(&probs);
        trace.predicted.push(pred);
        trace.correct.push(pred == y_true);
        trace.probs.push(probs);
        Ok(())
    };
    record(&mut trace, &current)?;

    let (mut remaining, mut deferred): (Vec<usize>, Vec<usize>) = match policy {
        Policy::Random { .. } => (0..units.len()).partition(|&u| !is_blank(&units[u], values)),
        Policy::Skyline => ((0..units.len()).collect(), Vec::new()),
    };
    while !remaining.is_empty() || !deferred.is_empty() {
        let u = if remaining.is_empty() {
            deferred.remove(0)
        } else {
            let u = match policy {
                Policy::Random { .. } => next_random(&remaining, rng)?,
                Policy::Skyline => next_skyline(model, features, &current, values, units, &remaining, y_true)?.0,
            };
            remaining.retain(|&r| r != u);
            u
        };
        apply_unit(&mut current, &units[u], values);
        trace.units.push(u);
        record(&mut trace, &current)?;
    }
    Ok(trace)
}

/// Runs `policy` on every sample of `data`. Random policies use stream `i` of
/// their seed for sample `i`.
pub fn run_dataset(
    model: &ConceptModel,
    data: &ConceptDataset,
    source: &InterventionSource,
    policy: Policy,
    granularity: Granularity,
) -> Result<Vec<InterventionTrace>> {
    if data.is_empty() {
        return Err(CoreError::Data("no samples to intervene on".into()));
    }
    if source.len() != data.len() {
        return Err(CoreError::Data(format!("source covers {} samples, dataset has {}", source.len(), data.len())));
    }
    let units = units(model.k(), granularity, Some(&data.schema))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut traces = Vec::with_capacity(data.len());
    for chunk in idx.chunks(256) {
        let feats = model.encode(&data.batch_inputs(chunk))?;
        let width = feats.row_len();
        for (r, &i) in chunk.iter().enumerate() {
            let f = Tensor::new(vec![1, width], feats.row(r).to_vec())?;
            let mut rng = match policy {
                Policy::Random { seed } => SeedStream::derive(seed, i as u64),
                Policy::Skyline => SeedStream::new(0),
            };
            traces.push(run_policy(model, &f, &data.ids[i], data.labels[i], &source.values[i], policy, &units, &mut rng)?);
        }
    }
    Ok(traces)
}

pub const TRACE_CSV_HEADER: &str = "sample_id,step,unit_id,predicted_class,p_true,correct";

/// CSV rows `sample_id,step,unit_id,predicted_class,p_true,correct`; step 0 has an empty unit.
pub fn write_traces_csv(traces: &[InterventionTrace], mut out: impl Write) -> Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for t in traces {
        for step in 0..t.steps() {
            let unit = if step == 0 { String::new() } else { t.units[step - 1].to_string() };
            writeln!(
                out,
                "{},{},{},{},{:e},{}",
                t.sample_id,
                step,
                unit,
                t.predicted[step],
                t.p_true(step),
                u8::from(t.correct[step])
            )?;
        }
    }
    Ok(())
}
