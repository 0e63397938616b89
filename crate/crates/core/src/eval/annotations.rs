use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

use super::metrics::{calibration_curve, CalibrationReport};
use crate::annotation::{SoftGroupAnnotation, MAX_MASS};
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};
use crate::schema::{ConceptGroupSchema, NAME_SEP};

/// Summary statistics of a set of elicited annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub n_annotations: usize,
    pub n_not_visible: usize,
    /// `histogram[v]` counts attribute masses equal to `v` (0..=100); masses
    /// above 100 are counted in `over_range`.
    pub histogram: Vec<u64>,
    pub over_range: u64,
    /// annotator → group → mean total mass.
    pub mean_total_mass: BTreeMap<String, BTreeMap<String, f64>>,
    /// group → every recorded total mass, in input order.
    pub group_totals: BTreeMap<String, Vec<u32>>,
    /// annotator → mean mass per annotation on attributes outside the keep-set.
    pub discarded_mass: Option<BTreeMap<String, f64>>,
}

/// Histogram, per-annotator mean total mass per group, per-group total-mass
/// distribution and (given `keep`, a set of `group::attribute` names) the
/// mean mass each annotator placed on discarded attributes.
pub fn annotation_stats(annotations: &[SoftGroupAnnotation], keep: Option<&HashSet<String>>) -> AnnotationStats {
    let mut histogram = vec![0u64; MAX_MASS as usize + 1];
    let mut over_range = 0;
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    let mut group_totals: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    let mut discarded: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut n_not_visible = 0;
    for a in annotations {
        n_not_visible += usize::from(a.not_visible);
        for &v in a.mass.values() {
            match histogram.get_mut(v as usize) {
                Some(h) => *h += 1,
                None => over_range += 1,
            }
        }
        let total = a.total_mass();
        let e = sums.entry(a.annotator_id.clone()).or_default().entry(a.group_id.clone()).or_default();
        e.0 += total as f64;
        e.1 += 1;
        group_totals.entry(a.group_id.clone()).or_default().push(total);
        if let Some(keep) = keep {
            let dropped: u32 = a
                .mass
                .iter()
                .filter(|(attr, _)| !keep.contains(&format!("{}{NAME_SEP}{attr}", a.group_id)))
                .map(|(_, &v)| v)
                .sum();
            let d = discarded.entry(a.annotator_id.clone()).or_default();
            d.0 += dropped as f64;
            d.1 += 1;
        }
    }
    AnnotationStats {
        n_annotations: annotations.len(),
        n_not_visible,
        histogram,
        over_range,
        mean_total_mass: sums
            .into_iter()
            .map(|(ann, groups)| (ann, groups.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()))
            .collect(),
        group_totals,
        discarded_mass: keep.map(|_| discarded.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect()),
    }
}

/// Ground-truth value of a concept for a stimulus, used to score annotations.
pub trait ReferenceProvider {
    fn reference(&self, stimulus_id: &str, concept: usize) -> Option<f64>;
}

/// Reference values averaged over every stimulus of the same class.
#[derive(Debug, Clone)]
pub struct ClassAveragedReference {
    class_of: HashMap<String, usize>,
    means: Vec<Vec<f64>>,
}

impl ClassAveragedReference {
    /// Averages the dataset's concept values per class; classes without samples get no reference.
    pub fn from_dataset(data: &ConceptDataset) -> Self {
        let k = data.k();
        let mut sums = vec![vec![0.0; k]; data.n_classes];
        let mut counts = vec![0usize; data.n_classes];
        for (c, &y) in data.concepts.iter().zip(&data.labels) {
            counts[y] += 1;
            sums[y].iter_mut().zip(c).for_each(|(s, v)| *s += v);
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| if n == 0 { Vec::new() } else { s.into_iter().map(|v| v / n as f64).collect() })
            .collect();
        Self {
            class_of: data.ids.iter().cloned().zip(data.labels.iter().copied()).collect(),
            means,
        }
    }

    pub fn class_means(&self, class: usize) -> Option<&[f64]> {
        self.means.get(class).filter(|m| !m.is_empty()).map(|m| m.as_slice())
    }
}

impl ReferenceProvider for ClassAveragedReference {
    fn reference(&self, stimulus_id: &str, concept: usize) -> Option<f64> {
        let &class = self.class_of.get(stimulus_id)?;
        self.class_means(class)?.get(concept).copied()
    }
}

/// Calibration of elicited masses against a reference. Every attribute of an
/// annotated group contributes one `(mass / 100, reference)` pair, with missing
/// attributes read as mass 0. Not-visible annotations and stimuli without a
/// reference are skipped.
pub fn annotation_calibration(
    annotations: &[SoftGroupAnnotation],
    schema: &ConceptGroupSchema,
    reference: &dyn ReferenceProvider,
    n_bins: usize,
) -> Result<CalibrationReport> {
    let mut conf = Vec::new();
    let mut outcome = Vec::new();
    for a in annotations.iter().filter(|a| !a.not_visible) {
        let g = schema
            .group_index(&a.group_id)
            .ok_or_else(|| CoreError::Data(format!("unknown group `{}`", a.group_id)))?;
        let group = schema.group(g);
        for (j, attr) in schema.group_range(g).zip(&group.attributes) {
            let Some(r) = reference.reference(&a.stimulus_id, j) else { continue };
            let m = a.mass.get(attr).copied().unwrap_or(0).min(MAX_MASS);
            conf.push(m as f64 / MAX_MASS as f64);
            outcome.push(r);
        }
    }
    calibration_curve(&conf, &outcome, n_bins)
}
