//! Sum-of-digits concept data built from MNIST zeros and ones, with
//! controllable concept uncertainty `delta`.
//!
//! Each sample stacks `p` digit planes as channels of a `28 × 28 × p` input.
//! Concept `i` is whether digit `i` is a one; the label is the number of ones.
//! With `delta > 0` every concept value is drawn from `Unif(0, delta)` (zeros)
//! or `Unif(1 - delta, 1)` (ones), and the digit is blended with a random
//! digit of the opposite class using that value as the mixing ratio.

use serde::{Deserialize, Serialize};

use super::idx::MnistStore;
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};
use crate::rng::SeedStream;
use crate::schema::ConceptGroupSchema;

/// Draws an uncertain concept value for a binary digit.
pub fn noise_concept(bit: bool, delta: f64, rng: &mut SeedStream) -> f64 {
    let u = delta * rng.uniform();
    if bit {
        1.0 - u
    } else {
        u
    }
}

/// Blends digit plane `x` with opposite-class plane `z` using concept value `c`.
///
/// `bit = 0`: `(1 - c)·x + c·z`; `bit = 1`: `c·x + (1 - c)·z`.
pub fn mix_digit(x: &[f64], bit: bool, c: f64, z: &[f64]) -> Vec<f64> {
    let own = if bit { c } else { 1.0 - c };
    x.iter().zip(z).map(|(&xv, &zv)| own * xv + (1.0 - own) * zv).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmnistConfig {
    pub n: usize,
    pub p: usize,
    pub delta: f64,
    pub seed: u64,
    /// Fraction of concept annotations hidden per sample.
    #[serde(default)]
    pub mask_fraction: f64,
}

pub fn gen_umnist(mnist: &MnistStore, cfg: &UmnistConfig) -> Result<ConceptDataset> {
    if cfg.n == 0 || cfg.p == 0 {
        return Err(CoreError::Param(format!("need n > 0 and p > 0, got n={} p={}", cfg.n, cfg.p)));
    }
    if !(0.0..=1.0).contains(&cfg.delta) {
        return Err(CoreError::Param(format!("delta {} outside [0, 1]", cfg.delta)));
    }
    if !(0.0..=1.0).contains(&cfg.mask_fraction) {
        return Err(CoreError::Param(format!("mask fraction {} outside [0, 1]", cfg.mask_fraction)));
    }
    let pools = [&mnist.by_digit[0], &mnist.by_digit[1]];
    if pools.iter().any(|p| p.is_empty()) {
        return Err(CoreError::Data("MNIST store needs both zeros and ones".into()));
    }
    let plane = mnist.image_len();
    let [_, h, w] = *mnist.images.shape() else { unreachable!() };
    let p = cfg.p;
    let n_masked = (cfg.mask_fraction * p as f64).round() as usize;

    let mut rng = SeedStream::new(cfg.seed);
    let mut ds = ConceptDataset {
        ids: Vec::with_capacity(cfg.n),
        input_shape: vec![h, w, p],
        inputs: Vec::with_capacity(cfg.n * plane * p),
        concepts: Vec::with_capacity(cfg.n),
        labels: Vec::with_capacity(cfg.n),
        masks: Vec::with_capacity(cfg.n),
        n_classes: p + 1,
        schema: ConceptGroupSchema::digits(p),
    };
    for s in 0..cfg.n {
        let mut planes = Vec::with_capacity(p);
        let mut c = Vec::with_capacity(p);
        let mut ones = 0;
        for _ in 0..p {
            let bit = rng.below(2) == 1;
            ones += usize::from(bit);
            let own = pools[usize::from(bit)];
            let other = pools[usize::from(!bit)];
            let x = mnist.image(own[rng.below(own.len())]);
            let z = mnist.image(other[rng.below(other.len())]);
            let ci = noise_concept(bit, cfg.delta, &mut rng);
            planes.push(mix_digit(x, bit, ci, z));
            c.push(ci);
        }
        let mut order: Vec<usize> = (0..p).collect();
        rng.shuffle(&mut order);
        let mut mask = vec![true; p];
        for &i in &order[..n_masked] {
            mask[i] = false;
        }
        // channels-last interleave
        for px in 0..plane {
            for pl in &planes {
                ds.inputs.push(pl[px]);
            }
        }
        ds.ids.push(format!("s{s:06}"));
        ds.concepts.push(c);
        ds.labels.push(ones);
        ds.masks.push(mask);
    }
    Ok(ds)
}
