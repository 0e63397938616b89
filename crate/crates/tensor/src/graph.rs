//! Computation record and reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Nodes are appended in evaluation order, so the node list is always in
//! topological order and [`Graph::backward`] simply walks it in reverse.

use crate::error::{shape_err, Result, TensorError};
use crate::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use crate::tensor::{ParamId, ParamSet, Parameter, Tensor};

/// Default negative slope of leaky-ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// One pixel of zero padding on every side; output is `ceil(H / stride)`.
    Same,
    /// No padding; output is `floor((H - 3) / stride) + 1`.
    Valid,
}

/// Stride and padding of a 3×3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: Padding) -> Result<Self> {
        if stride < 1 {
            return Err(TensorError::Param(format!("conv stride must be >= 1, got {stride}")));
        }
        Ok(Self { stride, padding })
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => 1,
            Padding::Valid => 0,
        }
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride < 1 {
            return Err(TensorError::Param(format!(
                "conv stride must be >= 1, got {}",
                self.stride
            )));
        }
        let pad = self.pad();
        if h + 2 * pad < 3 || w + 2 * pad < 3 {
            return shape_err("conv2d_3x3", format!("input {h}x{w} smaller than the kernel"));
        }
        Ok((
            (h + 2 * pad - 3) / self.stride + 1,
            (w + 2 * pad - 3) / self.stride + 1,
        ))
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<f64>,
}

impl BatchStats {
    /// `running = (1 - momentum) * running + momentum * batch`
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Training mode normalizes with batch statistics, whose gradient couples rows.
        training: bool,
    },
    Reshape {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Mix {
        plus: Var,
        minus: Var,
        probs: Var,
        col: usize,
    },
    Override {
        x: Var,
        mask: Vec<bool>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        sample_w: Vec<f64>,
        probs: Vec<f64>,
        norm: f64,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
        mask: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used for input-gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf holding a snapshot of a parameter; its gradient flows back to `id`.
    pub fn param(&mut self, id: ParamId, p: &Parameter) -> Var {
        let mut value = p.tensor.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    /// `x · w + b` with `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, fan_in) = self.matrix_dims("linear", x)?;
        let (w_in, fan_out) = self.matrix_dims("linear", w)?;
        if w_in != fan_in || self.shape(b) != [fan_out] {
            return shape_err(
                "linear",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            );
        }
        let bias = self.data(b);
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm_acc(self.data(x), self.data(w), &mut out, batch, fan_in, fan_out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// 3×3 cross-correlation of `x: [batch, H, W, Cin]` with `k: [3, 3, Cin, Cout]`
    /// plus an optional per-channel bias.
    pub fn conv2d_3x3(&mut self, x: Var, k: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [batch, h, w, cin] = *self.shape(x) else {
            return shape_err("conv2d_3x3", format!("input must be rank 4, got {:?}", self.shape(x)));
        };
        let [3, 3, kin, cout] = *self.shape(k) else {
            return shape_err("conv2d_3x3", format!("kernel must be [3,3,Cin,Cout], got {:?}", self.shape(k)));
        };
        if kin != cin {
            return shape_err("conv2d_3x3", format!("kernel expects {kin} input channels, got {cin}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv2d_3x3", format!("bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let (ho, wo) = spec.output_dims(h, w)?;
        let cols = im2col(self.data(x), [batch, h, w, cin], spec, ho, wo);
        let rows = batch * ho * wo;
        let mut out = match b {
            Some(b) => {
                let bias = self.data(b);
                let mut o = Vec::with_capacity(rows * cout);
                for _ in 0..rows {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![0.0; rows * cout],
        };
        gemm_acc(&cols, self.data(k), &mut out, rows, 9 * cin, cout);
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, ho, wo, cout], out)?;
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv { x, k, b, spec, cols }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return shape_err(op, format!("expected [batch, ..., channels], got {shape:?}"));
        }
        let c = *shape.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(op, format!("gamma/beta must have shape [{c}]"));
        }
        Ok((self.value(x).len() / c, c))
    }

    /// Batch normalization over every axis but the last, using batch statistics.
    /// Requires a batch of at least two samples.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c) = self.channel_layout("batch_norm", x, gamma, beta)?;
        if self.shape(x)[0] < 2 {
            return shape_err("batch_norm", "training mode needs a batch of at least 2");
        }
        let xs = self.data(x);
        let mut mean = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (n as f64 - 1.0).max(1.0)).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std, c);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics. Each row is
    /// normalized independently of the rest of the batch.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c) = self.channel_layout("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm", "running statistics do not match channel count");
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, running_mean, &inv_std, c);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            rg,
        ))
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        (xhat, out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Flattens everything but the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if start + len > cols {
            return shape_err("slice_cols", format!("columns {start}..{} of {cols}", start + len));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xs[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "nothing to concatenate");
        };
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return shape_err("concat_cols", format!("row counts {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// `probs[:, col] * plus + (1 - probs[:, col]) * minus`, row by row.
    pub fn mix(&mut self, plus: Var, minus: Var, probs: Var, col: usize) -> Result<Var> {
        let (rows, m) = self.matrix_dims("mix", plus)?;
        let (prow, pcols) = self.matrix_dims("mix", probs)?;
        if self.shape(minus) != [rows, m] || prow != rows || col >= pcols {
            return shape_err(
                "mix",
                format!("plus {:?}, minus {:?}, probs {:?}, col {col}", self.shape(plus), self.shape(minus), self.shape(probs)),
            );
        }
        let (pl, mi, pr) = (self.data(plus), self.data(minus), self.data(probs));
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let p = pr[r * pcols + col];
            for j in 0..m {
                out.push(p * pl[r * m + j] + (1.0 - p) * mi[r * m + j]);
            }
        }
        let rg = self.rg(plus) || self.rg(minus) || self.rg(probs);
        let value = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(value, Op::Mix { plus, minus, probs, col }, rg))
    }

    /// Replaces entries of `x` where `mask` is set by the matching `values`.
    /// Replaced entries are constants: no gradient flows through them.
    pub fn override_values(&mut self, x: Var, mask: Vec<bool>, values: &[f64]) -> Result<Var> {
        let n = self.value(x).len();
        if mask.len() != n || values.len() != n {
            return shape_err("override", format!("mask/values must have {n} entries"));
        }
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .zip(values)
            .map(|((&orig, &m), &v)| if m { v } else { orig })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Override { x, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Class-weighted softmax cross-entropy, `Σ w[y_n] · CE_n / Σ w[y_n]`.
    pub fn weighted_softmax_ce(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let (rows, classes) = self.matrix_dims("softmax_ce", logits)?;
        if labels.len() != rows || class_weights.len() != classes {
            return shape_err(
                "softmax_ce",
                format!("{rows}x{classes} logits, {} labels, {} class weights", labels.len(), class_weights.len()),
            );
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return shape_err("softmax_ce", format!("label {bad} out of range for {classes} classes"));
        }
        let z = self.data(logits);
        let mut probs = Vec::with_capacity(rows * classes);
        let mut sample_w = Vec::with_capacity(rows);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for &v in row {
                probs.push((v - lse).exp());
            }
            let w = class_weights[y];
            sample_w.push(w);
            total += w * (lse - row[y]);
        }
        let norm: f64 = sample_w.iter().sum();
        if norm <= 0.0 {
            return Err(TensorError::Param("class weights of the batch sum to zero".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                sample_w,
                probs,
                norm,
            },
            rg,
        ))
    }

    /// Masked binary cross-entropy against soft targets in `[0, 1]`.
    ///
    /// Returns the loss node and `true` when the mask is empty, in which case the loss is 0.
    /// The log terms use probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; the
    /// gradient is evaluated at the clamped value.
    pub fn bce(&mut self, probs: Var, targets: &[f64], mask: &[f64]) -> Result<(Var, bool)> {
        let n = self.value(probs).len();
        if targets.len() != n || mask.len() != n {
            return shape_err("bce", format!("{n} predictions, {} targets, {} mask entries", targets.len(), mask.len()));
        }
        if let Some(bad) = targets.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(TensorError::Param(format!("soft target {bad} outside [0, 1]")));
        }
        let denom: f64 = mask.iter().sum();
        let mut total = 0.0;
        if denom > 0.0 {
            for ((&p, &c), &m) in self.data(probs).iter().zip(targets).zip(mask) {
                if m != 0.0 {
                    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    total -= m * (c * p.ln() + (1.0 - c) * (1.0 - p).ln());
                }
            }
            total /= denom;
        }
        let rg = self.rg(probs);
        let v = self.push(
            Tensor::scalar(total),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                denom,
            },
            rg,
        );
        Ok((v, denom == 0.0))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the record.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes } = self;
        if nodes[loss.0].value.len() != 1 {
            return shape_err("backward", format!("loss must be a scalar, got {:?}", nodes[loss.0].value.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let params = nodes.iter().map(|n| n.param).collect();
        let requires = nodes.iter().map(|n| n.requires_grad && matches!(n.op, Op::Leaf)).collect();
        Ok(Gradients { grads, params, leaf: requires })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], [batch, h, w, c]: [usize; 4], spec: ConvSpec, ho: usize, wo: usize) -> Vec<f64> {
    let pad = spec.pad() as isize;
    let s = spec.stride;
    let width = 9 * c;
    let mut cols = vec![0.0; batch * ho * wo * width];
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * width;
                for ky in 0..3 {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], [batch, h, w, c]: [usize; 4], spec: ConvSpec, ho: usize, wo: usize, dx: &mut [f64]) {
    let pad = spec.pad() as isize;
    let s = spec.stride;
    let width = 9 * c;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * width;
                for ky in 0..3 {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for j in 0..c {
                            dx[dst + j] += dcols[src + j];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (batch, fan_in) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let fan_out = out.shape()[1];
            if needs(*x) {
                let mut dx = vec![0.0; batch * fan_in];
                gemm_a_bt_acc(dy, val(*w), &mut dx, batch, fan_out, fan_in);
                accumulate(nodes, grads, *x, dx);
            }
            if needs(*w) {
                let mut dw = vec![0.0; fan_in * fan_out];
                gemm_at_b_acc(val(*x), dy, &mut dw, batch, fan_in, fan_out);
                accumulate(nodes, grads, *w, dw);
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, column_sums(dy, fan_out));
            }
        }
        Op::Conv { x, k, b, spec, cols } => {
            let xs = nodes[x.0].value.shape();
            let in_shape = [xs[0], xs[1], xs[2], xs[3]];
            let (ho, wo, cout) = (out.shape()[1], out.shape()[2], out.shape()[3]);
            let rows = in_shape[0] * ho * wo;
            let width = 9 * in_shape[3];
            if needs(*k) {
                let mut dk = vec![0.0; width * cout];
                gemm_at_b_acc(cols, dy, &mut dk, rows, width, cout);
                accumulate(nodes, grads, *k, dk);
            }
            if let Some(b) = b {
                if needs(*b) {
                    accumulate(nodes, grads, *b, column_sums(dy, cout));
                }
            }
            if needs(*x) {
                let mut dcols = vec![0.0; rows * width];
                gemm_a_bt_acc(dy, val(*k), &mut dcols, rows, cout, width);
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                col2im(&dcols, in_shape, *spec, ho, wo, &mut dx);
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::LeakyRelu { x, slope } => {
            let dx = val(*x).iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { slope * g }).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Relu { x } => {
            let dx = val(*x).iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sigmoid { x } => {
            let dx = out.data().iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
            let c = inv_std.len();
            let n = xhat.len() / c;
            let g = val(*gamma);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (hrow, drow) in xhat.chunks_exact(c).zip(dy.chunks_exact(c)) {
                for j in 0..c {
                    dgamma[j] += drow[j] * hrow[j];
                    dbeta[j] += drow[j];
                }
            }
            if needs(*x) {
                let mut dx = Vec::with_capacity(xhat.len());
                for (hrow, drow) in xhat.chunks_exact(c).zip(dy.chunks_exact(c)) {
                    for j in 0..c {
                        let d = if *training {
                            // dx = γ·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                            g[j] * inv_std[j] / n as f64 * (n as f64 * drow[j] - dbeta[j] - hrow[j] * dgamma[j])
                        } else {
                            g[j] * inv_std[j] * drow[j]
                        };
                        dx.push(d);
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, dy.to_vec()),
        Op::SliceCols { x, start } => {
            let xs = nodes[x.0].value.shape();
            let (rows, cols) = (xs[0], xs[1]);
            let len = out.shape()[1];
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ConcatCols { parts } => {
            let rows = out.shape()[0];
            let total = out.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape()[1];
                if needs(p) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, dp);
                }
                offset += w;
            }
        }
        Op::Mix { plus, minus, probs, col } => {
            let (rows, m) = (out.shape()[0], out.shape()[1]);
            let pcols = nodes[probs.0].value.shape()[1];
            let (pl, mi, pr) = (val(*plus), val(*minus), val(*probs));
            let mut dplus = vec![0.0; rows * m];
            let mut dminus = vec![0.0; rows * m];
            let mut dprobs = vec![0.0; rows * pcols];
            for r in 0..rows {
                let p = pr[r * pcols + col];
                let mut acc = 0.0;
                for j in 0..m {
                    let g = dy[r * m + j];
                    dplus[r * m + j] = p * g;
                    dminus[r * m + j] = (1.0 - p) * g;
                    acc += g * (pl[r * m + j] - mi[r * m + j]);
                }
                dprobs[r * pcols + col] = acc;
            }
            accumulate(nodes, grads, *plus, dplus);
            accumulate(nodes, grads, *minus, dminus);
            accumulate(nodes, grads, *probs, dprobs);
        }
        Op::Override { x, mask } => {
            let dx = dy.iter().zip(mask).map(|(&g, &m)| if m { 0.0 } else { g }).collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            accumulate(nodes, grads, *b, dy.to_vec());
        }
        Op::Mul { a, b } => {
            let da = val(*b).iter().zip(dy).map(|(v, g)| v * g).collect();
            let db = val(*a).iter().zip(dy).map(|(v, g)| v * g).collect();
            accumulate(nodes, grads, *a, da);
            accumulate(nodes, grads, *b, db);
        }
        Op::Scale { x, s } => accumulate(nodes, grads, *x, dy.iter().map(|g| g * s).collect()),
        Op::Sum { x } => accumulate(nodes, grads, *x, vec![dy[0]; nodes[x.0].value.len()]),
        Op::SoftmaxCe { logits, labels, sample_w, probs, norm } => {
            let classes = probs.len() / labels.len();
            let mut dz = Vec::with_capacity(probs.len());
            for (r, &y) in labels.iter().enumerate() {
                let scale = dy[0] * sample_w[r] / norm;
                for j in 0..classes {
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    dz.push(scale * (probs[r * classes + j] - onehot));
                }
            }
            accumulate(nodes, grads, *logits, dz);
        }
        Op::Bce { probs, targets, mask, denom } => {
            let mut dp = vec![0.0; targets.len()];
            if *denom > 0.0 {
                for (j, p) in val(*probs).iter().enumerate() {
                    if mask[j] != 0.0 {
                        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        let c = targets[j];
                        dp[j] = -dy[0] * mask[j] * (c / p - (1.0 - c) / (1.0 - p)) / denom;
                    }
                }
            }
            accumulate(nodes, grads, *probs, dp);
        }
    }
}

fn column_sums(dy: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in dy.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<ParamId>>,
    leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Adds the gradients of every parameter leaf into `params[..].tensor.grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for (i, id) in self.params.iter().enumerate() {
            let Some(id) = id else { continue };
            if !self.leaf[i] {
                continue;
            }
            let p = params.get_mut(*id);
            match &self.grads[i] {
                Some(g) => p.tensor.accumulate_grad(g)?,
                // Parameter took part in the pass but nothing downstream of it reached the loss.
                None => p.tensor.accumulate_grad(&vec![0.0; p.tensor.len()])?,
            }
        }
        Ok(())
    }
}
