mod common;

use common::{fixed_cbm, random_tensor};
use softcbm_core::datagen::{default_toy_schema, gen_categorical_toy, ToyConfig};
use softcbm_core::interventions::*;
use softcbm_core::model::{train, BottleneckConfig, ConceptModel, Interventions, TrainConfig, Variant};
use softcbm_core::{ConceptGroupSchema, CoreError, SeedStream};
use softcbm_tensor::{linalg, Tensor};

fn some(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|&x| Some(x)).collect()
}

#[test]
fn random_draws() {
    let mut rng = SeedStream::new(1);
    assert_eq!(next_random(&[7], &mut rng).unwrap(), 7);
    assert!(matches!(next_random(&[], &mut rng), Err(CoreError::State(_))));

    let order = |seed| {
        let mut rng = SeedStream::new(seed);
        (0..20).map(|_| next_random(&[0, 1, 2, 3, 4], &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(order(3), order(3));

    let mut counts = [0usize; 4];
    for _ in 0..100_000 {
        counts[next_random(&[0, 1, 2, 3], &mut rng).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
    }
}

fn features(m: &ConceptModel, x: &Tensor) -> Tensor {
    m.encode(x).unwrap()
}

#[test]
fn skyline_with_one_candidate() {
    let m = fixed_cbm(&[0.5, 0.5], vec![1.0, 0.0, 0.0, 1.0], 2);
    let f = features(&m, &Tensor::zeros(vec![1, 1]));
    let units = units(2, Granularity::Concept, None).unwrap();
    let (u, _) = next_skyline(&m, &f, &Interventions::new(), &some(&[1.0, 0.0]), &units, &[1], 0).unwrap();
    assert_eq!(u, 1);
}

#[test]
fn skyline_matches_brute_force_enumeration() {
    let mut rng = SeedStream::new(2);
    for trial in 0..20 {
        let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 4, 3, 3), trial).unwrap();
        let x = random_tensor(&mut rng, vec![1, 4], 1.5);
        let f = features(&m, &x);
        let values: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let y = rng.below(3);
        let units = units(3, Granularity::Concept, None).unwrap();
        let (u, p) = next_skyline(&m, &f, &Interventions::new(), &some(&values), &units, &[0, 1, 2], y).unwrap();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in 0..3 {
            let out = m.forward(&x, &[[(j, values[j])].into()]).unwrap();
            let pj = linalg::softmax(out.logits.row(0))[y];
            if pj > best.1 {
                best = (j, pj);
            }
        }
        assert_eq!((u, p), best);
    }
}

#[test]
fn skyline_ties_go_to_the_lowest_index() {
    // concepts 0 and 1 push class 0 identically, concept 2 pushes class 1
    let m = fixed_cbm(&[0.5, 0.5, 0.5], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 2);
    let f = features(&m, &Tensor::zeros(vec![1, 1]));
    let units = units(3, Granularity::Concept, None).unwrap();
    let (u, _) = next_skyline(&m, &f, &Interventions::new(), &some(&[1.0, 1.0, 1.0]), &units, &[2, 1, 0], 0).unwrap();
    assert_eq!(u, 0);
}

#[test]
fn constant_head_gives_flat_trace() {
    let m = fixed_cbm(&[0.3, 0.6, 0.9], vec![0.0; 6], 2);
    let f = features(&m, &Tensor::zeros(vec![1, 1]));
    let units = units(3, Granularity::Concept, None).unwrap();
    for policy in [Policy::Skyline, Policy::Random { seed: 4 }] {
        let t = run_policy(&m, &f, "s", 1, &some(&[1.0, 0.0, 1.0]), policy, &units, &mut SeedStream::new(4)).unwrap();
        assert_eq!(t.steps(), 4);
        assert!(t.probs.iter().all(|p| *p == t.probs[0]));
    }
}

#[test]
fn full_ground_truth_trace_ends_at_f_of_truth() {
    let mut rng = SeedStream::new(5);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 5, 4, 3), 1).unwrap();
    let x = random_tensor(&mut rng, vec![1, 5], 1.0);
    let f = features(&m, &x);
    let truth = [1.0, 0.0, 0.0, 1.0];
    let units = units(4, Granularity::Concept, None).unwrap();
    let plain = m.forward(&x, &[]).unwrap();
    let all: Interventions = truth.iter().copied().enumerate().collect();
    let full = m.forward(&x, &[all]).unwrap();
    for policy in [Policy::Skyline, Policy::Random { seed: 1 }] {
        let t = run_policy(&m, &f, "s", 2, &some(&truth), policy, &units, &mut SeedStream::new(1)).unwrap();
        assert_eq!(t.steps(), 5);
        let mut sorted = t.units.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert_eq!(t.probs[0], plain.class_probs(0));
        assert_eq!(t.probs[4], full.class_probs(0));
    }
}

#[test]
fn skyline_steps_are_greedy_optimal() {
    let mut rng = SeedStream::new(6);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cem, 4, 5, 3), 2).unwrap();
    for _ in 0..10 {
        let x = random_tensor(&mut rng, vec![1, 4], 1.0);
        let f = features(&m, &x);
        let values: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let y = rng.below(3);
        let units = units(5, Granularity::Concept, None).unwrap();
        let t = run_policy(&m, &f, "s", y, &some(&values), Policy::Skyline, &units, &mut SeedStream::new(0)).unwrap();
        let mut current = Interventions::new();
        for step in 1..t.steps() {
            let chosen = t.units[step - 1];
            for alt in 0..5 {
                if current.contains_key(&alt) {
                    continue;
                }
                let mut trial = current.clone();
                trial.insert(alt, values[alt]);
                let p = m.forward(&x, &[trial]).unwrap().class_probs(0)[y];
                assert!(t.p_true(step) >= p, "step {step}: unit {chosen} beaten by {alt}");
            }
            current.insert(chosen, values[chosen]);
        }
    }
}

#[test]
fn random_traces_are_reproducible() {
    let mut rng = SeedStream::new(7);
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 4, 6, 3), 3).unwrap();
    let f = features(&m, &random_tensor(&mut rng, vec![1, 4], 1.0));
    let units = units(6, Granularity::Concept, None).unwrap();
    let v = some(&[0.1, 0.9, 0.2, 0.8, 0.3, 0.7]);
    let run = |seed| run_policy(&m, &f, "s", 0, &v, Policy::Random { seed }, &units, &mut SeedStream::new(seed)).unwrap();
    assert_eq!(run(11), run(11));
    assert_ne!(run(11).units, run(12).units);
}

#[test]
fn group_units_follow_the_schema() {
    let schema = ConceptGroupSchema::from_pairs([("a", vec!["x", "y"]), ("b", vec!["z"]), ("c", vec!["u", "v", "w"])]).unwrap();
    assert_eq!(units(6, Granularity::Group, Some(&schema)).unwrap(), vec![vec![0, 1], vec![2], vec![3, 4, 5]]);
    assert!(matches!(units(6, Granularity::Group, None), Err(CoreError::Config(_))));
    assert!(matches!(units(5, Granularity::Group, Some(&schema)), Err(CoreError::Config(_))));
}

#[test]
fn blank_groups_are_deferred_and_inert() {
    let schema = ConceptGroupSchema::from_pairs([("a", vec!["x", "y"]), ("b", vec!["z", "w"])]).unwrap();
    let m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, 3, 4, 2), 4).unwrap();
    let mut rng = SeedStream::new(8);
    let f = features(&m, &random_tensor(&mut rng, vec![1, 3], 1.0));
    let units = units(4, Granularity::Group, Some(&schema)).unwrap();
    let values = vec![None, None, Some(1.0), Some(0.0)];
    for seed in 0..10 {
        let t = run_policy(&m, &f, "s", 0, &values, Policy::Random { seed }, &units, &mut SeedStream::new(seed)).unwrap();
        assert_eq!(t.units, vec![1, 0]);
        assert_eq!(t.probs[2], t.probs[1]);
    }
    let t = run_policy(&m, &f, "s", 0, &values, Policy::Skyline, &units, &mut SeedStream::new(0)).unwrap();
    assert_eq!(t.steps(), 3);
    let blank_step = t.units.iter().position(|&u| u == 0).unwrap() + 1;
    assert_eq!(t.probs[blank_step], t.probs[blank_step - 1]);
}

#[test]
fn trace_csv_layout() {
    let m = fixed_cbm(&[0.5, 0.5], vec![1.0, 0.0, 0.0, 1.0], 2);
    let f = features(&m, &Tensor::zeros(vec![1, 1]));
    let units = units(2, Granularity::Concept, None).unwrap();
    let t = run_policy(&m, &f, "s7", 0, &some(&[1.0, 0.0]), Policy::Skyline, &units, &mut SeedStream::new(0)).unwrap();
    let mut buf = Vec::new();
    write_traces_csv(&[t], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample_id,step,unit_id,predicted_class,p_true,correct");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("s7,0,,"));
    assert!(lines[2].starts_with("s7,1,"));
    let fields: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(fields[5], "1");
}

#[test]
fn sources_from_coarse_population_and_noise() {
    let schema = default_toy_schema();
    let toy = gen_categorical_toy(&schema, &ToyConfig { n: 30, ..ToyConfig::default() }).unwrap();
    let src = InterventionSource::from_coarse(
        &schema,
        &toy.coarse,
        &Default::default(),
        softcbm_core::datagen::SpreadMode::Broad,
        &|_, _| None,
    )
    .unwrap();
    assert_eq!(src.len(), 30);
    assert!(src.values.iter().flatten().all(|v| v.is_some()));

    let noised = InterventionSource::noised(&toy.data.concepts, 0.3, 1).unwrap();
    for (row, bits) in noised.values.iter().zip(&toy.data.concepts) {
        for (v, b) in row.iter().zip(bits) {
            let v = v.unwrap();
            assert!(if *b == 1.0 { v >= 0.7 } else { v <= 0.3 });
        }
    }
    let pop = InterventionSource::from_population(&toy.class_attr_probs, &toy.data.labels).unwrap();
    assert_eq!(pop.values[0], some(&toy.class_attr_probs[toy.data.labels[0]]));
}

#[test]
fn skyline_beats_random_on_trained_toy_model() {
    let schema = default_toy_schema();
    let toy = gen_categorical_toy(&schema, &ToyConfig { n: 1200, attr_noise: 0.15, input_noise: 0.9, seed: 3, ..ToyConfig::default() }).unwrap();
    let train_idx: Vec<usize> = (0..1000).collect();
    let test_idx: Vec<usize> = (1000..1200).collect();
    let train_ds = toy.data.subset(&train_idx);
    let test_ds = toy.data.subset(&test_idx);
    let mut m = ConceptModel::new(BottleneckConfig::dense(Variant::Cbm, toy.data.input_len(), schema.k(), 6), 1).unwrap();
    train(&mut m, &train_ds, &TrainConfig { max_epochs: 60, batch_size: 64, lr: 5e-3, ..TrainConfig::default() }).unwrap();
    let src = InterventionSource::from_dataset("truth", &test_ds).unwrap();
    let best = |policy| {
        let traces = run_dataset(&m, &test_ds, &src, policy, Granularity::Group).unwrap();
        traces.iter().map(|t| f64::from(u8::from(t.correct.iter().any(|&c| c)))).sum::<f64>() / traces.len() as f64
    };
    let (sky, rnd) = (best(Policy::Skyline), best(Policy::Random { seed: 1 }));
    assert!(sky >= rnd, "skyline {sky} < random {rnd}");
}
