mod common;

use common::{bare_config, fixed_cbm, logit, random_tensor};
use softcbm_core::datagen::{gen_umnist, UmnistConfig};
use softcbm_core::model::*;
use softcbm_core::{ConceptDataset, ConceptGroupSchema, CoreError, SeedStream};
use softcbm_tensor::{ParamId, Tensor};

#[test]
fn no_interventions_equals_plain_forward() {
    let mut rng = SeedStream::new(1);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cem, 6, 4, 3), 2).unwrap();
    let x = random_tensor(&mut rng, vec![5, 6], 1.0);
    let plain = m.forward(&x, &[]).unwrap();
    let empty = m.forward(&x, &vec![Interventions::new(); 5]).unwrap();
    assert_eq!(plain, empty);
}

#[test]
fn intervening_with_own_prediction_changes_nothing() {
    let mut rng = SeedStream::new(2);
    for variant in [Variant::Cbm, Variant::Cem] {
        let m = ConceptModel::new(BottleneckConfig::dense(variant, 6, 4, 3), 3).unwrap();
        let x = random_tensor(&mut rng, vec![3, 6], 1.0);
        let plain = m.forward(&x, &[]).unwrap();
        let ivs: Vec<Interventions> = (0..3).map(|r| [(1, plain.concept_probs.row(r)[1])].into()).collect();
        let out = m.forward(&x, &ivs).unwrap();
        assert_eq!(out.logits, plain.logits, "{variant}");
        let all: Vec<Interventions> = (0..3).map(|r| plain.concept_probs.row(r).iter().copied().enumerate().collect()).collect();
        assert_eq!(m.forward(&x, &all).unwrap().logits, plain.logits, "{variant}");
    }
}

#[test]
fn hand_built_sum_head() {
    let m = fixed_cbm(&[0.2, 0.9], vec![1.0, 1.0], 1);
    let x = Tensor::zeros(vec![1, 1]);
    let plain = m.forward(&x, &[]).unwrap();
    assert!((plain.logits.data()[0] - 1.1).abs() < 1e-12);
    let out = m.forward(&x, &[[(0, 1.0)].into()]).unwrap();
    assert!((out.logits.data()[0] - 1.9).abs() < 1e-12);
    assert_eq!(out.concept_probs.data()[0], 1.0);
}

#[test]
fn intervention_index_and_value_are_checked() {
    let m = fixed_cbm(&[0.2, 0.9], vec![1.0, 1.0], 1);
    let x = Tensor::zeros(vec![1, 1]);
    assert!(matches!(m.forward(&x, &[[(2, 1.0)].into()]), Err(CoreError::Index { index: 2, k: 2 })));
    assert!(matches!(m.forward(&x, &[[(0, 1.5)].into()]), Err(CoreError::Param(_))));
}

#[test]
fn fully_intervened_cbm_ignores_the_input() {
    let mut rng = SeedStream::new(3);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 6, 4, 3), 4).unwrap();
    let a = random_tensor(&mut rng, vec![1, 6], 2.0);
    let b = random_tensor(&mut rng, vec![1, 6], 2.0);
    let iv: Interventions = [(0, 0.3), (1, 1.0), (2, 0.0), (3, 0.55)].into();
    let ya = m.forward(&a, std::slice::from_ref(&iv)).unwrap();
    let yb = m.forward(&b, std::slice::from_ref(&iv)).unwrap();
    assert_eq!(ya.logits, yb.logits);
}

#[test]
fn cem_endpoints_select_one_embedding() {
    let mut rng = SeedStream::new(4);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cem, 5, 3, 4), 5).unwrap();
    let x = random_tensor(&mut rng, vec![1, 5], 1.0);
    let mcfg = m.config().m;
    // Perturb the columns that produce concept 1's negative (or positive) embedding.
    let perturbed = |name: &str| {
        let mut p = m.clone();
        let mut w = p.params().by_name(name).unwrap().tensor.clone();
        let cols = w.shape()[1];
        for r in 0..w.shape()[0] {
            for c in mcfg..2 * mcfg {
                w.data_mut()[r * cols + c] += 0.7;
            }
        }
        p.set_param(name, w).unwrap();
        p
    };
    let at = |model: &ConceptModel, v: f64| model.forward(&x, &[[(1, v)].into()]).unwrap().logits;
    assert_eq!(at(&m, 1.0), at(&perturbed("concept.w_minus"), 1.0));
    assert_eq!(at(&m, 0.0), at(&perturbed("concept.w_plus"), 0.0));
    assert_ne!(at(&m, 0.5), at(&perturbed("concept.w_minus"), 0.5));

    // continuous in the mixing value
    let (l0, l1) = (at(&m, 0.4), at(&m, 0.4 + 1e-9));
    for (a, b) in l0.data().iter().zip(l1.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn cem_still_depends_on_input_when_fully_intervened() {
    let mut rng = SeedStream::new(5);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cem, 6, 2, 3), 6).unwrap();
    let a = random_tensor(&mut rng, vec![1, 6], 2.0);
    let b = random_tensor(&mut rng, vec![1, 6], 2.0);
    let iv: Interventions = [(0, 1.0), (1, 0.0)].into();
    assert_ne!(m.forward(&a, std::slice::from_ref(&iv)).unwrap().logits, m.forward(&b, &[iv]).unwrap().logits);
}

#[test]
fn encoded_path_matches_full_forward() {
    let mut rng = SeedStream::new(6);
    let m = ConceptModel::new(BottleneckConfig::umnist(Variant::Cem, 2), 1).unwrap();
    let x = random_tensor(&mut rng, vec![3, 28, 28, 2], 1.0);
    let ivs: Vec<Interventions> = vec![[(0, 0.2)].into(), Interventions::new(), [(1, 1.0), (0, 0.0)].into()];
    let full = m.forward(&x, &ivs).unwrap();
    let feats = m.encode(&x).unwrap();
    assert_eq!(m.forward_encoded(&feats, &ivs).unwrap(), full);
}

fn toy_dataset(n: usize, seed: u64) -> ConceptDataset {
    let schema = ConceptGroupSchema::digits(3);
    let mut rng = SeedStream::new(seed);
    let mut ds = ConceptDataset {
        ids: (0..n).map(|i| format!("d{i}")).collect(),
        input_shape: vec![3],
        inputs: Vec::new(),
        concepts: Vec::new(),
        labels: Vec::new(),
        masks: vec![vec![true; 3]; n],
        n_classes: 4,
        schema,
    };
    for _ in 0..n {
        let bits: Vec<f64> = (0..3).map(|_| rng.below(2) as f64).collect();
        ds.inputs.extend(bits.iter().map(|b| b + 0.3 * rng.normal()));
        ds.labels.push(bits.iter().sum::<f64>() as usize);
        ds.concepts.push(bits);
    }
    ds
}

#[test]
fn memorizing_one_sample_decreases_loss() {
    let one = toy_dataset(1, 1);
    let ds = one.subset(&[0; 16]);
    let mut m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 3, 3, 4), 0).unwrap();
    let h = train(&mut m, &ds, &TrainConfig { max_epochs: 6, ..TrainConfig::default() }).unwrap();
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.train_loss).collect();
    for w in losses.windows(2).take(5) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn alpha_zero_blocks_concept_gradient() {
    let ds = toy_dataset(8, 2);
    let batch = Batch::from_dataset(&ds, &(0..8).collect::<Vec<_>>());
    let w = class_weights(&ds.labels, 4);
    for variant in [Variant::Cbm, Variant::Cem] {
        let mut cfg = BottleneckConfig::dense(variant, 3, 3, 4);
        cfg.alpha = 0.0;
        let m = ConceptModel::new(cfg.clone(), 1).unwrap();
        let (_, grads) = m.loss_gradients(&batch, &w, Mode::Train, LossPart::Concept).unwrap();
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
        cfg.alpha = 1.0;
        let m = ConceptModel::new(cfg, 1).unwrap();
        let (_, grads) = m.loss_gradients(&batch, &w, Mode::Train, LossPart::Concept).unwrap();
        assert!(grads.iter().flatten().any(|&g| g != 0.0));
    }
}

#[test]
fn soft_target_equal_to_prediction_gives_entropy_floor() {
    let m = fixed_cbm(&[0.3, 0.8], vec![0.0, 0.0], 1);
    let batch = Batch {
        x: Tensor::zeros(vec![1, 1]),
        concepts: vec![0.3, 0.8],
        masks: vec![1.0, 1.0],
        labels: vec![0],
    };
    let (loss, _) = m.loss_gradients(&batch, &[1.0], Mode::Eval, LossPart::Concept).unwrap();
    let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    assert!((loss - (h(0.3) + h(0.8)) / 2.0).abs() < 1e-9);
    assert!(loss >= 0.0);
}

#[test]
fn training_is_bit_reproducible() {
    let ds = toy_dataset(60, 3);
    let run = || {
        let mut m = ConceptModel::new(BottleneckConfig::dense(Variant::Cem, 3, 3, 4), 9).unwrap();
        train(&mut m, &ds, &TrainConfig { max_epochs: 3, batch_size: 16, seed: 5, ..TrainConfig::default() }).unwrap();
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn training_learns_a_small_task() {
    let ds = toy_dataset(400, 4);
    let mut m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 3, 3, 4), 2).unwrap();
    let h = train(&mut m, &ds, &TrainConfig { max_epochs: 200, batch_size: 32, lr: 1e-2, ..TrainConfig::default() }).unwrap();
    assert_eq!(h.n_val, 80);
    assert!(concept_accuracy(&m, &ds, 0.5).unwrap() > 0.9);
    assert!(task_accuracy(&m, &ds).unwrap() > 0.8);
}

#[test]
fn training_rejects_mismatched_data() {
    let ds = toy_dataset(10, 5);
    let mut m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 3, 3, 5), 0).unwrap();
    assert!(matches!(train(&mut m, &ds, &TrainConfig::default()), Err(CoreError::Data(_))));
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let store = common::fake_mnist(4, 1);
    let ds = gen_umnist(&store, &UmnistConfig { n: 12, p: 2, delta: 0.1, seed: 1, mask_fraction: 0.0 }).unwrap();
    let mut m = ConceptModel::new(BottleneckConfig::umnist(Variant::Cbm, 2), 3).unwrap();
    train(&mut m, &ds, &TrainConfig { max_epochs: 2, batch_size: 4, ..TrainConfig::default() }).unwrap();
    m.provenance.insert("delta".into(), 0.1.into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.scl");
    m.save(&path).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"SCL1");
    let back = ConceptModel::load(&path).unwrap();
    let x = ds.batch_inputs(&[0, 1, 2]);
    assert_eq!(back.forward(&x, &[]).unwrap(), m.forward(&x, &[]).unwrap());
    assert_eq!(back.history, m.history);
    assert_eq!(back.provenance["delta"], 0.1);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("model.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["alpha"], 1.0);
}

#[test]
fn concept_accuracy_examples() {
    let t = vec![vec![1.0, 0.0, 1.0]];
    let m = vec![vec![true; 3]];
    assert_eq!(concept_accuracy_from(&t, &t, &m, 0.5).unwrap(), 1.0);
    let low = vec![vec![0.5 - 1e-9; 3]];
    assert_eq!(concept_accuracy_from(&low, &[vec![1.0; 3]], &m, 0.5).unwrap(), 0.0);
    assert!(matches!(concept_accuracy_from(&t, &t, &[vec![false; 3]], 0.5), Err(CoreError::Undefined(_))));
    // masked entries are ignored
    let half = concept_accuracy_from(&[vec![1.0, 1.0, 0.0]], &t, &[vec![true, false, false]], 0.5).unwrap();
    assert_eq!(half, 1.0);
}

#[test]
fn concept_accuracy_of_random_guesses_is_half() {
    let mut rng = SeedStream::new(9);
    let preds: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.uniform()]).collect();
    let targets: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.below(2) as f64]).collect();
    let acc = concept_accuracy_from(&preds, &targets, &vec![vec![true]; 10_000], 0.5).unwrap();
    assert!((acc - 0.5).abs() < 0.02, "{acc}");
}

/// Central differences on a sample of coordinates of every parameter.
fn max_gradient_error(m: &ConceptModel, batch: &Batch, weights: &[f64]) -> f64 {
    let (_, analytic) = m.loss_gradients(batch, weights, Mode::Train, LossPart::Joint).unwrap();
    let h = 1e-5;
    let mut rng = SeedStream::new(17);
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let picks: Vec<usize> = if n <= 12 { (0..n).collect() } else { (0..12).map(|_| rng.below(n)).collect() };
        for j in picks {
            let eval = |delta: f64| {
                let mut p = m.clone();
                p.params_mut().get_mut(ParamId(pi)).tensor.data_mut()[j] += delta;
                p.loss_value(batch, weights, Mode::Train).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - grad[j]).abs() / numeric.abs().max(grad[j].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let store = common::fake_mnist(4, 2);
    let ds = gen_umnist(&store, &UmnistConfig { n: 4, p: 3, delta: 0.3, seed: 2, mask_fraction: 0.34 }).unwrap();
    let batch = Batch::from_dataset(&ds, &[0, 1, 2, 3]);
    let weights = vec![0.5, 1.0, 1.5, 2.0];
    for variant in [Variant::Cbm, Variant::Cem] {
        let m = ConceptModel::new(BottleneckConfig::umnist(variant, 3), 7).unwrap();
        let err = max_gradient_error(&m, &batch, &weights);
        assert!(err < 1e-3, "{variant}: {err}");
    }
}

#[test]
fn bare_config_has_expected_parameters() {
    let m = ConceptModel::new(bare_config(Variant::Cbm, 1, 2, 1), 0).unwrap();
    let names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["concept.w", "concept.b", "head0.w", "head0.b"]);
    assert!(logit(0.5).abs() < 1e-15);
}

#[test]
fn config_validation() {
    let mut cfg = BottleneckConfig::umnist(Variant::Cem, 3);
    cfg.m = 0;
    assert!(matches!(ConceptModel::new(cfg, 0), Err(CoreError::Config(_))));
    let mut cfg = BottleneckConfig::umnist(Variant::Cbm, 3);
    cfg.alpha = -1.0;
    assert!(matches!(ConceptModel::new(cfg, 0), Err(CoreError::Config(_))));
    let mut cfg = BottleneckConfig::umnist(Variant::Cbm, 3);
    cfg.backbone.strides[0] = 0;
    assert!(ConceptModel::new(cfg, 0).is_err());
    assert_eq!(BottleneckConfig::umnist(Variant::Cem, 3).bottleneck_width(), 24);
    assert_eq!("cem".parse::<Variant>().unwrap(), Variant::Cem);
}
