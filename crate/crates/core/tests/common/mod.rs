#![allow(dead_code)]

use softcbm_core::datagen::MnistStore;
use softcbm_core::model::{BackboneSpec, BottleneckConfig, PaddingMode, Variant};
use softcbm_core::{ConceptModel, SeedStream};
use softcbm_tensor::Tensor;

/// Small fake MNIST: `per_digit` random 28×28 images for each of 0 and 1.
pub fn fake_mnist(per_digit: usize, seed: u64) -> MnistStore {
    let mut rng = SeedStream::new(seed);
    let n = 2 * per_digit;
    let data = (0..n * 784).map(|_| (rng.below(256) as f64) / 255.0).collect();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    MnistStore::new(Tensor::new(vec![n, 28, 28], data).unwrap(), labels).unwrap()
}

pub fn mnist_fixture(split: &str) -> MnistStore {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist01");
    MnistStore::load_split(dir, split).unwrap()
}

/// Dense model with no hidden layers anywhere: concepts are
/// `sigmoid(x · concept.w + concept.b)` and logits `ĉ · head0.w + head0.b`.
pub fn bare_config(variant: Variant, input_len: usize, k: usize, n_classes: usize) -> BottleneckConfig {
    BottleneckConfig {
        variant,
        k,
        m: 3,
        alpha: 1.0,
        input_shape: vec![input_len],
        backbone: BackboneSpec {
            conv_filters: vec![],
            strides: vec![],
            padding: PaddingMode::Same,
            batch_norm: false,
            hidden: 0,
        },
        head: vec![],
        n_classes,
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// CBM whose concept probabilities are fixed at `probs` (weights zero) and
/// whose label head is `head_w` (`[k, n_classes]`) with zero bias.
pub fn fixed_cbm(probs: &[f64], head_w: Vec<f64>, n_classes: usize) -> ConceptModel {
    let k = probs.len();
    let mut m = ConceptModel::new(bare_config(Variant::Cbm, 1, k, n_classes), 0).unwrap();
    m.set_param("concept.w", Tensor::zeros(vec![1, k])).unwrap();
    m.set_param("concept.b", Tensor::new(vec![k], probs.iter().map(|&p| logit(p)).collect()).unwrap()).unwrap();
    m.set_param("head0.w", Tensor::new(vec![k, n_classes], head_w).unwrap()).unwrap();
    m.set_param("head0.b", Tensor::zeros(vec![n_classes])).unwrap();
    m
}

pub fn random_tensor(rng: &mut SeedStream, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect()).unwrap()
}
