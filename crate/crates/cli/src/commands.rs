use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use softcbm_core::datagen::{
    aggregate_population, default_toy_schema, gen_categorical_toy, gen_umnist, plausible_from_frequencies, ConfidenceMap,
    MnistStore, ToyConfig, UmnistConfig,
};
use softcbm_core::eval::{
    annotation_calibration, annotation_stats, calibration_curve, intervention_curve, roc_auc, ClassAveragedReference,
    InterventionCurve,
};
use softcbm_core::interventions::{run_dataset, write_traces_csv};
use softcbm_core::model::{concept_accuracy, task_accuracy, train, TrainConfig};
use softcbm_core::{
    BottleneckConfig, CoarseAnnotation, ConceptDataset, ConceptModel, CoreError, InterventionSource, Policy,
    SoftGroupAnnotation,
};

use crate::args::*;
use crate::error::{CliError, Result};

const COARSE_FILE: &str = "coarse.jsonl";
const POPULATION_FILE: &str = "class_attr_probs.json";

/// `config.json` in every output directory: the command, its fully resolved
/// arguments, the tool version and the seed.
fn write_resolved(out: &Path, command: &Command, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut v = serde_json::to_value(command)?;
    v["version"] = json!(env!("CARGO_PKG_VERSION"));
    v["seed"] = json!(seed);
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match &command {
        Command::GenUmnist(a) => gen_umnist_cmd(a, &command),
        Command::GenToy(a) => gen_toy_cmd(a, &command),
        Command::Train(a) => train_cmd(a, &command),
        Command::Intervene(a) => intervene_cmd(a, &command, false),
        Command::EvalCurve(a) => intervene_cmd(a, &command, true),
        Command::EvalCalibration(a) => calibration_cmd(a, &command),
        Command::Serve(a) => serve_cmd(a),
        Command::Export(a) => export_cmd(a),
    }
}

fn gen_umnist_cmd(a: &GenUmnistArgs, command: &Command) -> Result<()> {
    let mnist = MnistStore::load_split(&a.mnist_dir, &a.split)?;
    let cfg = UmnistConfig {
        n: a.n,
        p: a.p,
        delta: a.delta,
        seed: a.seed,
        mask_fraction: a.mask_fraction,
    };
    let ds = gen_umnist(&mnist, &cfg)?;
    ds.save(&a.out, json!({ "kind": "umnist", "config": cfg }))?;
    write_resolved(&a.out, command, Some(a.seed))
}

fn gen_toy_cmd(a: &GenToyArgs, command: &Command) -> Result<()> {
    let schema = default_toy_schema();
    let cfg = ToyConfig {
        n_classes: a.n_classes,
        n: a.n,
        attr_noise: a.attr_noise,
        input_noise: a.input_noise,
        seed: a.seed,
        ..ToyConfig::default()
    };
    let toy = gen_categorical_toy(&schema, &cfg)?;
    toy.data.save(&a.out, json!({ "kind": "toy", "config": cfg }))?;
    let mut w = BufWriter::new(File::create(a.out.join(COARSE_FILE))?);
    for anns in &toy.coarse {
        serde_json::to_writer(&mut w, anns)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_json(&a.out.join(POPULATION_FILE), &toy.class_attr_probs)?;
    write_resolved(&a.out, command, Some(a.seed))
}

fn load_coarse(dir: &Path, n: usize) -> Result<Vec<Vec<CoarseAnnotation>>> {
    let path = dir.join(COARSE_FILE);
    let file = File::open(&path).map_err(|e| CliError::Usage(format!("{}: {e} (coarse annotations come from gen-toy)", path.display())))?;
    let mut out = Vec::with_capacity(n);
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    if out.len() != n {
        return Err(CliError::Usage(format!("{}: {} rows for {n} samples", path.display(), out.len())));
    }
    Ok(out)
}

/// Soft values from the dataset's coarse annotations. Narrow mode takes the
/// attributes seen among the sample's class as its plausible set.
fn coarse_source(data: &ConceptDataset, dir: &Path, la: &LabelArgs) -> Result<InterventionSource> {
    let coarse = load_coarse(dir, data.len())?;
    let reference = ClassAveragedReference::from_dataset(data);
    let plausible = |s: usize, g: usize| {
        let means = reference.class_means(data.labels[s])?;
        Some(plausible_from_frequencies(&means[data.schema.group_range(g)]))
    };
    Ok(InterventionSource::from_coarse(&data.schema, &coarse, &ConfidenceMap::with_probably(la.probably_rho), la.mode, &plausible)?)
}

fn model_config(data: &ConceptDataset, a: &TrainArgs) -> Result<BottleneckConfig> {
    let mut cfg = match data.input_shape.as_slice() {
        [28, 28, p] if *p == data.k() => BottleneckConfig::umnist(a.variant, *p),
        _ => BottleneckConfig::dense(a.variant, data.input_len(), data.k(), data.n_classes),
    };
    cfg.alpha = a.alpha;
    cfg.m = a.m;
    cfg.n_classes = data.n_classes;
    if let Some(s) = &a.strides {
        cfg.backbone.strides = s
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| CliError::Usage(format!("bad stride `{x}`"))))
            .collect::<Result<_>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, command: &Command) -> Result<()> {
    let (mut data, meta) = ConceptDataset::load(&a.data)?;
    let mut provenance = serde_json::Map::new();
    provenance.insert("data".into(), json!(a.data));
    provenance.insert("generator".into(), meta.generator.clone());
    if let Some(d) = meta.generator.pointer("/config/delta") {
        provenance.insert("delta".into(), d.clone());
    }
    provenance.insert("labels".into(), json!(a.labels));
    match a.labels.as_str() {
        "truth" => {}
        "coarse" => {
            let src = coarse_source(&data, &a.data, &a.label_args)?;
            for (i, row) in src.values.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    match v {
                        Some(v) => data.concepts[i][j] = *v,
                        None => data.masks[i][j] = false,
                    }
                }
            }
            provenance.insert("probably_rho".into(), json!(a.label_args.probably_rho));
            provenance.insert("mode".into(), json!(a.label_args.mode));
        }
        other => return Err(CliError::Usage(format!("unknown labels `{other}` (truth|coarse)"))),
    }
    let cfg = model_config(&data, a)?;
    let mut model = ConceptModel::new(cfg, a.seed)?;
    model.provenance = provenance;
    let tc = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience,
        val_fraction: a.val_fraction,
        seed: a.seed,
    };
    let history = train(&mut model, &data, &tc)?;
    std::fs::create_dir_all(&a.out)?;
    model.save(a.out.join(format!("{}.scl", a.name)))?;
    log::info!("trained {} epochs, best {:?}", history.epochs.len(), history.best_epoch);
    write_resolved(&a.out, command, Some(a.seed))
}

fn load_annotations(path: &Path) -> Result<Vec<SoftGroupAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)?;
        // service log records wrap the annotation
        let ann = v.get("annotation").cloned().unwrap_or(v);
        out.push(
            serde_json::from_value(ann)
                .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn build_source(data: &ConceptDataset, a: &InterveneArgs) -> Result<InterventionSource> {
    Ok(match a.source.as_str() {
        "truth" => InterventionSource::from_dataset("truth", data)?,
        "noised" => InterventionSource::noised(&data.concepts, a.delta, a.seed)?,
        "coarse" => coarse_source(data, &a.data, &a.label_args)?,
        "population" => {
            let coarse = coarse_source(data, &a.data, &a.label_args)?;
            let pairs: Vec<(usize, Vec<f64>)> = coarse
                .values
                .iter()
                .zip(&data.labels)
                .map(|(row, &y)| (y, row.iter().map(|v| v.unwrap_or(0.0)).collect()))
                .collect();
            let per_class = aggregate_population(&pairs, data.n_classes)?;
            InterventionSource::from_population(&per_class, &data.labels)?
        }
        "elicited" => {
            let path = a
                .annotations
                .as_ref()
                .ok_or_else(|| CliError::Usage("--source elicited needs --annotations".into()))?;
            InterventionSource::from_elicited(data, &load_annotations(path)?)?
        }
        other => return Err(CliError::Usage(format!("unknown source `{other}` (truth|noised|coarse|population|elicited)"))),
    })
}

fn parse_policy(name: &str, seed: u64) -> Result<Policy> {
    match name {
        "random" => Ok(Policy::Random { seed }),
        "skyline" => Ok(Policy::Skyline),
        other => Err(CliError::Usage(format!("unknown policy `{other}` (random|skyline)"))),
    }
}

fn intervene_cmd(a: &InterveneArgs, command: &Command, curve: bool) -> Result<()> {
    let model = ConceptModel::load(&a.model)?;
    let (mut data, _) = ConceptDataset::load(&a.data)?;
    let mut source = build_source(&data, a)?;
    if let Some(limit) = a.limit.filter(|&l| l < data.len()) {
        let idx: Vec<usize> = (0..limit).collect();
        data = data.subset(&idx);
        source.values.truncate(limit);
    }
    let policy = parse_policy(&a.policy, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    if curve {
        let c = intervention_curve(&model, &data, policy, &source, a.granularity)?;
        c.write_csv(BufWriter::new(File::create(a.out.join("curve.csv"))?))?;
        write_json(&a.out.join("curve.json"), &curve_summary(&c)?)?;
    } else {
        let traces = run_dataset(&model, &data, &source, policy, a.granularity)?;
        write_traces_csv(&traces, BufWriter::new(File::create(a.out.join("traces.csv"))?))?;
    }
    write_resolved(&a.out, command, Some(a.seed))
}

fn curve_summary(c: &InterventionCurve) -> Result<Value> {
    Ok(json!({
        "policy": c.policy,
        "source": c.source,
        "n_samples": c.n_samples,
        "auc": c.auc()?,
        "accuracy_at_half": c.accuracy_at_fraction(0.5)?,
        "accuracies": c.accuracies,
        "mean_p_true": c.mean_p_true,
    }))
}

fn calibration_cmd(a: &CalibrationArgs, command: &Command) -> Result<()> {
    let model = ConceptModel::load(&a.model)?;
    let (data, _) = ConceptDataset::load(&a.data)?;
    let out = model.predict_dataset(&data)?;
    let mut conf = Vec::new();
    let mut truth = Vec::new();
    for i in 0..data.len() {
        for j in 0..data.k() {
            if data.masks[i][j] {
                conf.push(out.concept_probs.row(i)[j]);
                truth.push(data.concepts[i][j]);
            }
        }
    }
    let report = calibration_curve(&conf, &truth, a.bins)?;
    let hard: Vec<bool> = truth.iter().map(|&t| t >= 0.5).collect();
    let auc = match roc_auc(&conf, &hard) {
        Ok(v) => Some(v),
        Err(CoreError::Undefined(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let mut summary = json!({
        "concept_ece": report.ece,
        "concept_bins": report.bins,
        "concept_roc_auc": auc,
        "concept_accuracy": concept_accuracy(&model, &data, 0.5)?,
        "task_accuracy": task_accuracy(&model, &data)?,
    });
    if let Some(path) = &a.annotations {
        let anns = load_annotations(path)?;
        let keep: HashSet<String> = data.schema.concept_names().into_iter().collect();
        summary["annotation_stats"] = serde_json::to_value(annotation_stats(&anns, Some(&keep)))?;
        let reference = ClassAveragedReference::from_dataset(&data);
        let ann_report = annotation_calibration(&anns, &data.schema, &reference, a.bins)?;
        summary["annotation_ece"] = json!(ann_report.ece);
        summary["annotation_bins"] = serde_json::to_value(&ann_report.bins)?;
    }
    std::fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("calibration.csv"))?);
    writeln!(w, "lower,upper,count,mean_confidence,accuracy")?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for b in &report.bins {
        writeln!(w, "{},{},{},{},{}", b.lower, b.upper, b.count, opt(b.mean_confidence), opt(b.accuracy))?;
    }
    w.flush()?;
    write_json(&a.out.join("calibration.json"), &summary)?;
    write_resolved(&a.out, command, None)
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let cfg = softcbm_service::ServiceConfig {
        models_dir: a.models_dir.clone(),
        stimuli_dir: a.stimuli_dir.clone(),
        log_path: a.log_path.clone(),
        cors_origin: a.cors_origin.clone(),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port)).await?;
        // a machine-readable line so scripts can find an ephemeral port
        println!("{}", json!({ "listening": listener.local_addr()?.port() }));
        softcbm_service::serve(&cfg, listener).await?;
        Ok(())
    })
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&a.out)?);
    writeln!(w, "run,policy,source,auc,step,fraction,accuracy,mean_p_true")?;
    for run in &a.runs {
        let summary: Value = serde_json::from_slice(&std::fs::read(run.join("curve.json"))?)?;
        let acc: Vec<f64> = serde_json::from_value(summary["accuracies"].clone())?;
        let p: Vec<f64> = serde_json::from_value(summary["mean_p_true"].clone())?;
        let last = (acc.len().max(2) - 1) as f64;
        for (step, (a_s, p_s)) in acc.iter().zip(&p).enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                run.display(),
                summary["policy"].as_str().unwrap_or(""),
                summary["source"].as_str().unwrap_or("").replace(',', ";"),
                summary["auc"],
                step,
                step as f64 / last,
                a_s,
                p_s
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
