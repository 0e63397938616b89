use serde::{Deserialize, Serialize};

use softcbm_tensor::{Adam, Graph, BN_MOMENTUM};

use super::network::{Batch, ConceptModel, Mode};
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 50,
            patience: 15,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches, measured before each update.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub class_weights: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
}

/// Balanced class weights `N / (n_classes · count(y))`.
///
/// If some class never occurs every count is incremented by one first.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0f64; n_classes];
    for &y in labels {
        counts[y] += 1.0;
    }
    let mut total = labels.len() as f64;
    if counts.iter().any(|&c| c == 0.0) {
        log::warn!("class missing from the training labels; using add-one smoothed counts for class weights");
        counts.iter_mut().for_each(|c| *c += 1.0);
        total += n_classes as f64;
    }
    counts.iter().map(|&c| total / (n_classes as f64 * c)).collect()
}

/// Splits `0..n` into (train, validation) using the head of a seeded shuffle
/// as the validation part.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    SeedStream::derive(seed, 0x5917).shuffle(&mut idx);
    let n_val = ((n as f64 * val_fraction).floor() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Chunks of at most `size`; a trailing single-sample chunk is folded into its predecessor
/// so that batch statistics are always defined.
fn batches(idx: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = idx.chunks(size).collect();
    if out.len() >= 2 && out.last().map(|c| c.len()) == Some(1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &idx[start..];
    }
    out
}

fn check_compatible(model: &ConceptModel, data: &ConceptDataset) -> Result<()> {
    let cfg = model.config();
    if data.is_empty() {
        return Err(CoreError::Data("cannot train on an empty dataset".into()));
    }
    if data.n_classes != cfg.n_classes {
        return Err(CoreError::Data(format!("dataset has {} classes, model {}", data.n_classes, cfg.n_classes)));
    }
    if data.k() != cfg.k {
        return Err(CoreError::Data(format!("dataset has {} concepts, model {}", data.k(), cfg.k)));
    }
    if data.input_shape != cfg.input_shape {
        return Err(CoreError::Data(format!(
            "dataset input shape {:?}, model {:?}",
            data.input_shape, cfg.input_shape
        )));
    }
    data.validate()
}

/// Mean joint loss over `idx`, chunk losses weighted by chunk size.
pub fn evaluate_loss(model: &ConceptModel, data: &ConceptDataset, idx: &[usize], weights: &[f64]) -> Result<f64> {
    if idx.is_empty() {
        return Err(CoreError::Undefined("loss over an empty index set".into()));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        let batch = Batch::from_dataset(data, chunk);
        total += model.loss_value(&batch, weights, Mode::Eval)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Joint training with Adam and early stopping on the validation loss.
///
/// The parameters from the best epoch are restored at the end. When the split
/// leaves no validation data the training loss is monitored instead.
pub fn train(model: &mut ConceptModel, data: &ConceptDataset, cfg: &TrainConfig) -> Result<TrainingHistory> {
    check_compatible(model, data)?;
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(CoreError::Config("batch_size and max_epochs must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(CoreError::Config(format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    let uses_bn = !model.running_stats().is_empty();
    let (mut train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    if uses_bn && train_idx.len() < 2 {
        return Err(CoreError::Data("batch normalization needs at least two training samples".into()));
    }
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let weights = class_weights(&train_labels, data.n_classes);
    let adam = Adam::with_lr(cfg.lr);
    let mut order_rng = SeedStream::derive(cfg.seed, 0xe90c);

    let mut history = TrainingHistory {
        class_weights: weights.clone(),
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        ..TrainingHistory::default()
    };
    let mut best: Option<(f64, ConceptModel)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order_rng.shuffle(&mut train_idx);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in batches(&train_idx, cfg.batch_size) {
            let batch = Batch::from_dataset(data, chunk);
            let mut g = Graph::new();
            let xv = g.input(batch.x.clone());
            let out = model.build(&mut g, xv, Mode::Train, &[])?;
            let lv = model.loss(&mut g, &out, &batch, &weights)?;
            let value = g.value(lv.total).data()[0];
            if !value.is_finite() {
                return Err(CoreError::State(format!("non-finite training loss at epoch {epoch}")));
            }
            let grads = g.backward(lv.total)?;
            model.params_mut().zero_grad();
            grads.accumulate_into(model.params_mut())?;
            adam.step(model.params_mut())?;
            for (stats, running) in out.stats.iter().zip(model.running_stats_mut()) {
                stats.update_running(&mut running.mean, &mut running.var, BN_MOMENTUM);
            }
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, data, &val_idx, &weights)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let monitored = val_loss.unwrap_or(train_loss);
        log::debug!("epoch {epoch}: train {train_loss:.5} monitored {monitored:.5}");
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            let mut snapshot = model.clone();
            snapshot.history = TrainingHistory::default();
            best = Some((monitored, snapshot));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        let provenance = std::mem::take(&mut model.provenance);
        *model = snapshot;
        model.provenance = provenance;
    }
    model.history = history.clone();
    Ok(history)
}
