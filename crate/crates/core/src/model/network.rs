use std::collections::BTreeMap;

use softcbm_tensor::{
    linalg, BatchStats, Graph, ParamId, ParamSet, Tensor, Var, BN_EPS, LEAKY_SLOPE,
};

use super::config::{BottleneckConfig, Variant};
use super::train::TrainingHistory;
use crate::dataset::ConceptDataset;
use crate::error::{CoreError, Result};
use crate::rng::SeedStream;

/// Human-supplied concept values for one sample, keyed by concept index.
pub type Interventions = BTreeMap<usize, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; rows are processed independently.
    Eval,
}

/// Which part of the joint objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossPart {
    Joint,
    Task,
    /// The concept term including its `alpha` factor.
    Concept,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvIds {
    kernel: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, PartialEq)]
enum ConceptIds {
    Cbm {
        w: ParamId,
        b: ParamId,
    },
    Cem {
        w_plus: ParamId,
        b_plus: ParamId,
        w_minus: ParamId,
        b_minus: ParamId,
        w_score: ParamId,
        b_score: ParamId,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    convs: Vec<ConvIds>,
    hidden: Option<(ParamId, ParamId)>,
    concept: ConceptIds,
    head: Vec<(ParamId, ParamId)>,
}

/// Outputs of a forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `[batch, k]` concept probabilities after interventions.
    pub concept_probs: Tensor,
    /// `[batch, n_classes]` label logits.
    pub logits: Tensor,
}

impl Forward {
    pub fn class_probs(&self, row: usize) -> Vec<f64> {
        linalg::softmax(self.logits.row(row))
    }

    pub fn predicted_class(&self, row: usize) -> usize {
        linalg::argmax(self.logits.row(row))
    }
}

/// One mini-batch of training data.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    /// Flattened `[batch, k]` soft targets.
    pub concepts: Vec<f64>,
    /// Flattened `[batch, k]` 0/1 mask.
    pub masks: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(data: &ConceptDataset, idx: &[usize]) -> Self {
        Self {
            x: data.batch_inputs(idx),
            concepts: idx.iter().flat_map(|&i| data.concepts[i].iter().copied()).collect(),
            masks: idx
                .iter()
                .flat_map(|&i| data.masks[i].iter().map(|&m| if m { 1.0 } else { 0.0 }))
                .collect(),
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) struct Outputs {
    /// Concept probabilities before interventions.
    pub raw_probs: Var,
    pub logits: Var,
    pub stats: Vec<BatchStats>,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub task: Var,
    pub concept: Var,
}

/// A concept bottleneck (CBM) or concept embedding (CEM) model.
///
/// `x → g(x) → ĉ → f(ĉ) → ŷ`. For a CBM the bottleneck is the vector of concept
/// probabilities; for a CEM it is the concatenation of per-concept embeddings
/// `p̂_i·c_i⁺ + (1 − p̂_i)·c_i⁻`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    config: BottleneckConfig,
    params: ParamSet,
    layout: Layout,
    running: Vec<RunningStats>,
    pub history: TrainingHistory,
    /// Free-form training provenance (data generator settings and the like).
    pub provenance: serde_json::Map<String, serde_json::Value>,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual framework default for linear and conv layers.
fn fan_in_uniform(rng: &mut SeedStream, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

impl ConceptModel {
    /// Freshly initialized model. Weights are fan-in uniform, biases zero,
    /// normalization scales one.
    pub fn new(config: BottleneckConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::derive(seed, 0x1417);
        let mut params = ParamSet::new();
        let mut running = Vec::new();

        let mut convs = Vec::new();
        let mut cin = config.input_shape.last().copied().unwrap_or(1);
        for (l, &cout) in config.backbone.conv_filters.iter().enumerate() {
            let kernel = params.add(format!("conv{l}.kernel"), fan_in_uniform(&mut rng, 9 * cin, vec![3, 3, cin, cout]));
            let bias = params.add(format!("conv{l}.bias"), Tensor::zeros(vec![cout]));
            let norm = if config.backbone.batch_norm {
                let gamma = params.add(format!("conv{l}.bn_gamma"), Tensor::full(vec![cout], 1.0));
                let beta = params.add(format!("conv{l}.bn_beta"), Tensor::zeros(vec![cout]));
                running.push(RunningStats {
                    mean: vec![0.0; cout],
                    var: vec![1.0; cout],
                });
                Some((gamma, beta))
            } else {
                None
            };
            convs.push(ConvIds { kernel, bias, norm });
            cin = cout;
        }

        let flat = config.flat_features()?;
        let hidden = if config.backbone.hidden > 0 {
            let h = config.backbone.hidden;
            Some((
                params.add("hidden.w", fan_in_uniform(&mut rng, flat, vec![flat, h])),
                params.add("hidden.b", Tensor::zeros(vec![h])),
            ))
        } else {
            None
        };
        let feat = config.feature_width()?;
        let k = config.k;
        let concept = match config.variant {
            Variant::Cbm => ConceptIds::Cbm {
                w: params.add("concept.w", fan_in_uniform(&mut rng, feat, vec![feat, k])),
                b: params.add("concept.b", Tensor::zeros(vec![k])),
            },
            Variant::Cem => {
                let km = k * config.m;
                ConceptIds::Cem {
                    w_plus: params.add("concept.w_plus", fan_in_uniform(&mut rng, feat, vec![feat, km])),
                    b_plus: params.add("concept.b_plus", Tensor::zeros(vec![km])),
                    w_minus: params.add("concept.w_minus", fan_in_uniform(&mut rng, feat, vec![feat, km])),
                    b_minus: params.add("concept.b_minus", Tensor::zeros(vec![km])),
                    w_score: params.add("concept.w_score", fan_in_uniform(&mut rng, 2 * config.m, vec![2 * config.m, 1])),
                    b_score: params.add("concept.b_score", Tensor::zeros(vec![1])),
                }
            }
        };
        let mut head = Vec::new();
        let mut width = config.bottleneck_width();
        for (l, &out) in config.head.iter().chain(std::iter::once(&config.n_classes)).enumerate() {
            head.push((
                params.add(format!("head{l}.w"), fan_in_uniform(&mut rng, width, vec![width, out])),
                params.add(format!("head{l}.b"), Tensor::zeros(vec![out])),
            ));
            width = out;
        }

        Ok(Self {
            config,
            params,
            layout: Layout {
                convs,
                hidden,
                concept,
                head,
            },
            running,
            history: TrainingHistory::default(),
            provenance: serde_json::Map::new(),
        })
    }

    pub fn config(&self) -> &BottleneckConfig {
        &self.config
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the named parameter's values; the shape must match.
    pub fn set_param(&mut self, name: &str, values: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| CoreError::Param(format!("no parameter named `{name}`")))?;
        if p.tensor.shape() != values.shape() {
            return Err(CoreError::Param(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.tensor.shape(),
                values.shape()
            )));
        }
        p.tensor = values;
        Ok(())
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 1 || x.shape()[1..] != self.config.input_shape[..] {
            return Err(CoreError::Data(format!(
                "input shape {:?} does not match [batch, {:?}]",
                x.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Backbone features `g(x)`.
    fn backbone(&self, g: &mut Graph, x: Var, mode: Mode, stats: &mut Vec<BatchStats>) -> Result<Var> {
        let mut h = x;
        for (l, ids) in self.layout.convs.iter().enumerate() {
            let spec = self.config.backbone.conv_spec(l)?;
            let k = g.param(ids.kernel, self.params.get(ids.kernel));
            let b = g.param(ids.bias, self.params.get(ids.bias));
            h = g.conv2d_3x3(h, k, Some(b), spec)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if let Some((gamma, beta)) = ids.norm {
                let gv = g.param(gamma, self.params.get(gamma));
                let bv = g.param(beta, self.params.get(beta));
                h = match mode {
                    Mode::Train => {
                        let (out, s) = g.batch_norm_train(h, gv, bv, BN_EPS)?;
                        stats.push(s);
                        out
                    }
                    Mode::Eval => {
                        let r = &self.running[l];
                        g.batch_norm_eval(h, gv, bv, &r.mean, &r.var, BN_EPS)?
                    }
                };
            }
        }
        if g.shape(h).len() != 2 {
            h = g.flatten(h)?;
        }
        if let Some((w, b)) = self.layout.hidden {
            let wv = g.param(w, self.params.get(w));
            let bv = g.param(b, self.params.get(b));
            h = g.linear(h, wv, bv)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    fn linear_param(&self, g: &mut Graph, h: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = g.param(w, self.params.get(w));
        let bv = g.param(b, self.params.get(b));
        Ok(g.linear(h, wv, bv)?)
    }

    /// Concept layer and label head on top of backbone features.
    fn heads(&self, g: &mut Graph, feat: Var, ivs: &[Interventions]) -> Result<(Var, Var)> {
        let k = self.config.k;
        let (raw_probs, bottleneck) = match &self.layout.concept {
            ConceptIds::Cbm { w, b } => {
                let z = self.linear_param(g, feat, (*w, *b))?;
                let p = g.sigmoid(z);
                (p, self.intervene(g, p, ivs)?)
            }
            ConceptIds::Cem {
                w_plus,
                b_plus,
                w_minus,
                b_minus,
                w_score,
                b_score,
            } => {
                let m = self.config.m;
                let plus = self.linear_param(g, feat, (*w_plus, *b_plus))?;
                let plus = g.leaky_relu(plus, LEAKY_SLOPE);
                let minus = self.linear_param(g, feat, (*w_minus, *b_minus))?;
                let minus = g.leaky_relu(minus, LEAKY_SLOPE);
                let ws = g.param(*w_score, self.params.get(*w_score));
                let bs = g.param(*b_score, self.params.get(*b_score));
                let mut pairs = Vec::with_capacity(k);
                let mut scores = Vec::with_capacity(k);
                for i in 0..k {
                    let pi = g.slice_cols(plus, i * m, m)?;
                    let mi = g.slice_cols(minus, i * m, m)?;
                    let both = g.concat_cols(&[pi, mi])?;
                    scores.push(g.linear(both, ws, bs)?);
                    pairs.push((pi, mi));
                }
                let z = g.concat_cols(&scores)?;
                let p = g.sigmoid(z);
                let mixing = self.intervene(g, p, ivs)?;
                let mixed = pairs
                    .iter()
                    .enumerate()
                    .map(|(i, &(pi, mi))| g.mix(pi, mi, mixing, i))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                (p, g.concat_cols(&mixed)?)
            }
        };
        let mut h = bottleneck;
        let last = self.layout.head.len() - 1;
        for (l, &ids) in self.layout.head.iter().enumerate() {
            h = self.linear_param(g, h, ids)?;
            if l < last {
                h = g.relu(h);
            }
        }
        Ok((raw_probs, h))
    }

    /// Overrides concept probabilities with intervention values. An empty
    /// slice (or all-empty maps) leaves the graph untouched.
    fn intervene(&self, g: &mut Graph, probs: Var, ivs: &[Interventions]) -> Result<Var> {
        if ivs.iter().all(|m| m.is_empty()) {
            return Ok(probs);
        }
        let k = self.config.k;
        let rows = g.shape(probs)[0];
        if ivs.len() != rows {
            return Err(CoreError::Param(format!("{} intervention maps for a batch of {rows}", ivs.len())));
        }
        let mut mask = vec![false; rows * k];
        let mut values = vec![0.0; rows * k];
        for (r, map) in ivs.iter().enumerate() {
            for (&i, &v) in map {
                mask[r * k + i] = true;
                values[r * k + i] = v;
            }
        }
        Ok(g.override_values(probs, mask, &values)?)
    }

    pub fn validate_interventions(&self, ivs: &[Interventions]) -> Result<()> {
        for map in ivs {
            for (&i, &v) in map {
                if i >= self.config.k {
                    return Err(CoreError::Index { index: i, k: self.config.k });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(CoreError::Param(format!("intervention value {v} for concept {i} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn build(&self, g: &mut Graph, x: Var, mode: Mode, ivs: &[Interventions]) -> Result<Outputs> {
        let mut stats = Vec::new();
        let feat = self.backbone(g, x, mode, &mut stats)?;
        let (raw_probs, logits) = self.heads(g, feat, ivs)?;
        Ok(Outputs { raw_probs, logits, stats })
    }

    pub(crate) fn loss(&self, g: &mut Graph, out: &Outputs, batch: &Batch, class_weights: &[f64]) -> Result<LossVars> {
        let task = g.weighted_softmax_ce(out.logits, &batch.labels, class_weights)?;
        let (bce, _) = g.bce(out.raw_probs, &batch.concepts, &batch.masks)?;
        let concept = g.scale(bce, self.config.alpha);
        let total = g.add(task, concept)?;
        Ok(LossVars { total, task, concept })
    }

    /// Forward pass. `ivs` is either empty (no interventions) or holds one map per row.
    pub fn forward(&self, x: &Tensor, ivs: &[Interventions]) -> Result<Forward> {
        self.check_input(x)?;
        self.validate_interventions(ivs)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.build(&mut g, xv, Mode::Eval, ivs)?;
        // The reported concepts are the ones the label head actually saw.
        let probs = self.apply_to_probs(g.value(out.raw_probs), ivs);
        Ok(Forward {
            concept_probs: probs,
            logits: g.value(out.logits).clone(),
        })
    }

    fn apply_to_probs(&self, raw: &Tensor, ivs: &[Interventions]) -> Tensor {
        let mut t = raw.clone();
        let k = self.config.k;
        for (r, map) in ivs.iter().enumerate() {
            for (&i, &v) in map {
                t.data_mut()[r * k + i] = v;
            }
        }
        t
    }

    /// Evaluation-mode backbone features, `[batch, feature_width]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let feat = self.backbone(&mut g, xv, Mode::Eval, &mut Vec::new())?;
        Ok(g.value(feat).clone())
    }

    /// Forward pass from features returned by [`encode`](Self::encode).
    /// Identical to [`forward`](Self::forward) on the original inputs.
    pub fn forward_encoded(&self, features: &Tensor, ivs: &[Interventions]) -> Result<Forward> {
        let width = self.config.feature_width()?;
        if features.rank() != 2 || features.shape()[1] != width {
            return Err(CoreError::Data(format!("features {:?} do not match width {width}", features.shape())));
        }
        self.validate_interventions(ivs)?;
        let mut g = Graph::new();
        let fv = g.input(features.clone());
        let (raw, logits) = self.heads(&mut g, fv, ivs)?;
        Ok(Forward {
            concept_probs: self.apply_to_probs(g.value(raw), ivs),
            logits: g.value(logits).clone(),
        })
    }

    /// Evaluation-mode predictions for a whole dataset, in chunks.
    pub fn predict_dataset(&self, data: &ConceptDataset) -> Result<Forward> {
        let mut probs = Vec::with_capacity(data.len() * self.k());
        let mut logits = Vec::with_capacity(data.len() * self.n_classes());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(512) {
            let out = self.forward(&data.batch_inputs(chunk), &[])?;
            probs.extend_from_slice(out.concept_probs.data());
            logits.extend_from_slice(out.logits.data());
        }
        Ok(Forward {
            concept_probs: Tensor::new(vec![data.len(), self.k()], probs)?,
            logits: Tensor::new(vec![data.len(), self.n_classes()], logits)?,
        })
    }

    /// Loss value and per-parameter gradients (in parameter order) for one batch.
    /// Does not modify the model.
    pub fn loss_gradients(&self, batch: &Batch, class_weights: &[f64], mode: Mode, part: LossPart) -> Result<(f64, Vec<Vec<f64>>)> {
        let (value, grads, _) = self.loss_gradients_stats(batch, class_weights, mode, part)?;
        Ok((value, grads))
    }

    pub(crate) fn loss_gradients_stats(
        &self,
        batch: &Batch,
        class_weights: &[f64],
        mode: Mode,
        part: LossPart,
    ) -> Result<(f64, Vec<Vec<f64>>, Vec<BatchStats>)> {
        self.check_input(&batch.x)?;
        let mut g = Graph::new();
        let xv = g.input(batch.x.clone());
        let out = self.build(&mut g, xv, mode, &[])?;
        let lv = self.loss(&mut g, &out, batch, class_weights)?;
        let target = match part {
            LossPart::Joint => lv.total,
            LossPart::Task => lv.task,
            LossPart::Concept => lv.concept,
        };
        let value = g.value(target).data()[0];
        let grads = g.backward(target)?;
        let mut scratch = self.params.clone();
        scratch.zero_grad();
        grads.accumulate_into(&mut scratch)?;
        let per_param = scratch
            .iter()
            .map(|p| p.tensor.grad.clone().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
            .collect();
        Ok((value, per_param, out.stats))
    }

    /// Joint loss without gradients.
    pub fn loss_value(&self, batch: &Batch, class_weights: &[f64], mode: Mode) -> Result<f64> {
        self.check_input(&batch.x)?;
        let mut g = Graph::new();
        let xv = g.input(batch.x.clone());
        let out = self.build(&mut g, xv, mode, &[])?;
        let lv = self.loss(&mut g, &out, batch, class_weights)?;
        Ok(g.value(lv.total).data()[0])
    }
}
