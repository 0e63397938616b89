use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use softcbm_core::datagen::SpreadMode;
use softcbm_core::{Granularity, Variant};

use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "softcbm", version, about = "Concept bottleneck experiments with uncertain concept labels and interventions")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command", content = "args")]
pub enum Command {
    /// Generate an UMNIST dataset from MNIST zeros and ones.
    GenUmnist(GenUmnistArgs),
    /// Generate the categorical toy dataset with simulated coarse annotations.
    GenToy(GenToyArgs),
    /// Train a CBM or CEM.
    Train(TrainArgs),
    /// Run an intervention policy and write per-sample traces.
    Intervene(InterveneArgs),
    /// Intervention-accuracy curve and its area.
    EvalCurve(InterveneArgs),
    /// Concept calibration of a model and, optionally, of human annotations.
    EvalCalibration(CalibrationArgs),
    /// Run the elicitation service.
    Serve(ServeArgs),
    /// Collate curve outputs from several runs into one CSV.
    Export(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenUmnistArgs {
    /// Directory with `{split}-images-idx3-ubyte` and `{split}-labels-idx1-ubyte`.
    #[arg(long)]
    pub mnist_dir: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub mask_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 6)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub attr_noise: f64,
    #[arg(long, default_value_t = 0.6)]
    pub input_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// How concept values are turned into soft labels or intervention values.
#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    /// Confidence ρ given to "probably" coarse annotations.
    #[arg(long, default_value_t = 0.7)]
    pub probably_rho: f64,
    /// Spread of coarse-annotation doubt: broad or narrow.
    #[arg(long, default_value = "broad")]
    #[serde(serialize_with = "as_debug")]
    pub mode: SpreadMode,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "cbm")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// CEM embedding width.
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 15)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Per-layer conv strides, comma separated.
    #[arg(long)]
    pub strides: Option<String>,
    /// Concept labels: truth (dataset values) or coarse (simulated annotations).
    #[arg(long, default_value = "truth")]
    pub labels: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub label_args: LabelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// File stem of the checkpoint.
    #[arg(long, default_value = "model")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InterveneArgs {
    /// Checkpoint (`.scl`; the sidecar `.json` must sit next to it).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// random or skyline.
    #[arg(long, default_value = "random")]
    pub policy: String,
    #[arg(long, default_value = "concept")]
    #[serde(serialize_with = "as_debug")]
    pub granularity: Granularity,
    /// truth, noised, coarse, population or elicited.
    #[arg(long, default_value = "truth")]
    pub source: String,
    /// Uncertainty of noised intervention values.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub label_args: LabelArgs,
    /// JSON-Lines annotations for the elicited source.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Only the first `limit` samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrationArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Also assess these JSON-Lines annotations against class-averaged references.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub models_dir: PathBuf,
    #[arg(long)]
    pub stimuli_dir: PathBuf,
    #[arg(long, default_value = "annotations.jsonl")]
    pub log_path: PathBuf,
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    /// Output directories of eval-curve runs.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn as_debug<T: std::fmt::Debug, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:?}").to_lowercase())
}

/// Splices `--config file.json` into the argument list: each key becomes a
/// flag placed before the user's own flags, which therefore win.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let (path, width) = match argv[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (argv.get(pos + 1).cloned().ok_or_else(|| CliError::Usage("--config needs a path".into()))?, 2),
    };
    let text = std::fs::read_to_string(&path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Usage(format!("{path}: config must be a JSON object")))?;
    let mut injected = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => injected.push(flag),
            serde_json::Value::String(s) => injected.extend([flag, s.clone()]),
            serde_json::Value::Array(items) => {
                injected.push(flag);
                injected.extend(items.iter().map(|i| i.as_str().map_or_else(|| i.to_string(), String::from)));
            }
            other => injected.extend([flag, other.to_string()]),
        }
    }
    let mut out: Vec<String> = argv[..pos].to_vec();
    out.extend(argv[pos + width..].iter().cloned());
    // after the subcommand name
    let at = out.iter().skip(1).position(|a| !a.starts_with('-')).map_or(out.len(), |i| i + 2);
    out.splice(at..at, injected);
    Ok(out)
}
