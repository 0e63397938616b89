//! Small categorical concept data shaped like bird-attribute benchmarks.
//!
//! Every class has a prototype attribute per concept group. A sample draws a
//! class, then for each group keeps the prototype with probability
//! `1 - attr_noise` or otherwise draws an attribute uniformly from the group,
//! so `P(a | class) = (1 - attr_noise)·[a = prototype] + attr_noise / |group|`.
//! Inputs are the one-hot ground-truth attributes plus Gaussian noise.
//! A simulated annotator marks one attribute per group with a confidence tag,
//! erring more often when less confident.

use serde::{Deserialize, Serialize};

use crate::annotation::{CoarseAnnotation, Confidence};
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};
use crate::rng::SeedStream;
use crate::schema::ConceptGroupSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_classes: usize,
    pub n: usize,
    /// Probability of replacing a prototype attribute by a uniform draw.
    pub attr_noise: f64,
    /// Standard deviation of the Gaussian input noise.
    pub input_noise: f64,
    /// Probabilities of `[Guessing, Probably, Definitely]` tags.
    pub omega_probs: [f64; 3],
    /// Probability that the annotator marks a wrong attribute, per tag.
    pub omega_error: [f64; 3],
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            n: 1000,
            attr_noise: 0.1,
            input_noise: 0.6,
            omega_probs: [0.15, 0.35, 0.5],
            omega_error: [0.5, 0.2, 0.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    /// Concepts hold the hard ground-truth attribute bits.
    pub data: ConceptDataset,
    /// One coarse annotation per group per sample.
    pub coarse: Vec<Vec<CoarseAnnotation>>,
    /// `prototypes[class][group]` = attribute index within the group.
    pub prototypes: Vec<Vec<usize>>,
    /// Generator's class-conditional attribute probabilities, `[class][concept]`.
    pub class_attr_probs: Vec<Vec<f64>>,
}

/// Default toy schema: four groups of three or four attributes.
pub fn default_toy_schema() -> ConceptGroupSchema {
    ConceptGroupSchema::from_pairs([
        ("wing_color", vec!["blue", "brown", "red", "yellow"]),
        ("beak_shape", vec!["dagger", "pointed", "rounded"]),
        ("tail_shape", vec!["forked", "notched", "rounded", "squared"]),
        ("size", vec!["small", "medium", "large"]),
    ])
    .expect("valid")
}

pub fn gen_categorical_toy(schema: &ConceptGroupSchema, cfg: &ToyConfig) -> Result<ToyDataset> {
    if schema.n_groups() == 0 {
        return Err(CoreError::Param("schema has no groups".into()));
    }
    if cfg.n == 0 || cfg.n_classes == 0 {
        return Err(CoreError::Param("need n > 0 and n_classes > 0".into()));
    }
    if !(0.0..=1.0).contains(&cfg.attr_noise) {
        return Err(CoreError::Param(format!("attr_noise {} outside [0, 1]", cfg.attr_noise)));
    }
    let combos = schema.groups().iter().map(|g| g.attributes.len() as f64).product::<f64>();
    if (cfg.n_classes as f64) > combos {
        return Err(CoreError::Param(format!("{} classes cannot have distinct prototypes among {combos} combinations", cfg.n_classes)));
    }
    let k = schema.k();
    let sizes: Vec<usize> = schema.groups().iter().map(|g| g.attributes.len()).collect();

    let mut proto_rng = SeedStream::derive(cfg.seed, 0);
    let mut prototypes: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_classes);
    while prototypes.len() < cfg.n_classes {
        let cand: Vec<usize> = sizes.iter().map(|&s| proto_rng.below(s)).collect();
        if !prototypes.contains(&cand) {
            prototypes.push(cand);
        }
    }
    let class_attr_probs: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|proto| {
            let mut probs = vec![0.0; k];
            for (g, &a) in proto.iter().enumerate() {
                let range = schema.group_range(g);
                for j in range.clone() {
                    probs[j] = cfg.attr_noise / sizes[g] as f64;
                }
                probs[range.start + a] += 1.0 - cfg.attr_noise;
            }
            probs
        })
        .collect();

    let mut rng = SeedStream::derive(cfg.seed, 1);
    let mut data = ConceptDataset {
        ids: Vec::with_capacity(cfg.n),
        input_shape: vec![k],
        inputs: Vec::with_capacity(cfg.n * k),
        concepts: Vec::with_capacity(cfg.n),
        labels: Vec::with_capacity(cfg.n),
        masks: Vec::with_capacity(cfg.n),
        n_classes: cfg.n_classes,
        schema: schema.clone(),
    };
    let mut coarse = Vec::with_capacity(cfg.n);
    for s in 0..cfg.n {
        let class = rng.below(cfg.n_classes);
        let mut bits = vec![0.0; k];
        let mut anns = Vec::with_capacity(sizes.len());
        for (g, &size) in sizes.iter().enumerate() {
            let attr = if rng.bernoulli(cfg.attr_noise) { rng.below(size) } else { prototypes[class][g] };
            bits[schema.group_range(g).start + attr] = 1.0;

            let u = rng.uniform();
            let (omega, err) = if u < cfg.omega_probs[0] {
                (Confidence::Guessing, cfg.omega_error[0])
            } else if u < cfg.omega_probs[0] + cfg.omega_probs[1] {
                (Confidence::Probably, cfg.omega_error[1])
            } else {
                (Confidence::Definitely, cfg.omega_error[2])
            };
            let marked = if size > 1 && rng.bernoulli(err) {
                // uniform over the other attributes
                let o = rng.below(size - 1);
                if o >= attr {
                    o + 1
                } else {
                    o
                }
            } else {
                attr
            };
            anns.push(CoarseAnnotation {
                group: g,
                on_bits: (0..size).map(|j| j == marked).collect(),
                omega,
            });
        }
        for &b in &bits {
            data.inputs.push(b + cfg.input_noise * rng.normal());
        }
        data.ids.push(format!("t{s:06}"));
        data.concepts.push(bits);
        data.labels.push(class);
        data.masks.push(vec![true; k]);
        coarse.push(anns);
    }
    Ok(ToyDataset {
        data,
        coarse,
        prototypes,
        class_attr_probs,
    })
}

/// Class whose prototype agrees with the most groups of `bits` (lowest index on ties).
pub fn nearest_prototype(schema: &ConceptGroupSchema, prototypes: &[Vec<usize>], bits: &[f64]) -> usize {
    let mut best = (0, usize::MAX);
    for (c, proto) in prototypes.iter().enumerate() {
        let mismatches = proto
            .iter()
            .enumerate()
            .filter(|(g, &a)| bits[schema.group_range(*g).start + a] < 0.5)
            .count();
        if mismatches < best.1 {
            best = (c, mismatches);
        }
    }
    best.0
}
