//! In-memory concept datasets and their on-disk layout.
//!
//! A dataset directory holds:
//!
//! * `meta.json`: schema, class count, per-sample input shape, generator info
//! * `dataset.jsonl`: one `{"id", "x_ref", "c", "y", "mask"}` record per sample
//! * `planes.scl`: input tensors in the checkpoint binary format, keyed by `x_ref`

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use softcbm_tensor::{checkpoint, Tensor};

use crate::error::{CoreError, Result};
use crate::schema::ConceptGroupSchema;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub ids: Vec<String>,
    /// Shape of one sample, e.g. `[28, 28, p]`.
    pub input_shape: Vec<usize>,
    /// All samples back to back.
    pub inputs: Vec<f64>,
    /// Soft concept targets in `[0, 1]`.
    pub concepts: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `true` where a concept annotation is provided.
    pub masks: Vec<Vec<bool>>,
    pub n_classes: usize,
    pub schema: ConceptGroupSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: ConceptGroupSchema,
    pub n_classes: usize,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    id: String,
    x_ref: String,
    c: Vec<f64>,
    y: usize,
    mask: Vec<u8>,
}

impl ConceptDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.schema.k()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.input_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Inputs of the given samples as one `[batch, ...input_shape]` tensor.
    pub fn batch_inputs(&self, idx: &[usize]) -> Tensor {
        let w = self.input_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.input(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.input_shape);
        Tensor::new(shape, data).expect("consistent by construction")
    }

    pub fn subset(&self, idx: &[usize]) -> ConceptDataset {
        ConceptDataset {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            input_shape: self.input_shape.clone(),
            inputs: self.batch_inputs(idx).into_data(),
            concepts: idx.iter().map(|&i| self.concepts[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            masks: idx.iter().map(|&i| self.masks[i].clone()).collect(),
            n_classes: self.n_classes,
            schema: self.schema.clone(),
        }
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Checks the structural invariants every consumer relies on.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let k = self.k();
        if self.ids.len() != n || self.concepts.len() != n || self.masks.len() != n || self.inputs.len() != n * self.input_len() {
            return Err(CoreError::Data("per-sample arrays disagree in length".into()));
        }
        for i in 0..n {
            if self.concepts[i].len() != k || self.masks[i].len() != k {
                return Err(CoreError::Data(format!("sample {i}: expected {k} concepts")));
            }
            if let Some(c) = self.concepts[i].iter().find(|c| !(0.0..=1.0).contains(*c)) {
                return Err(CoreError::Data(format!("sample {i}: concept value {c} outside [0, 1]")));
            }
            if self.labels[i] >= self.n_classes {
                return Err(CoreError::Data(format!("sample {i}: label {} >= {} classes", self.labels[i], self.n_classes)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>, generator: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let meta = DatasetMeta {
            schema: self.schema.clone(),
            n_classes: self.n_classes,
            input_shape: self.input_shape.clone(),
            generator,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        let mut w = BufWriter::new(File::create(dir.join("dataset.jsonl"))?);
        let mut planes = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let x_ref = format!("x/{}", self.ids[i]);
            let rec = Record {
                id: self.ids[i].clone(),
                x_ref: x_ref.clone(),
                c: self.concepts[i].clone(),
                y: self.labels[i],
                mask: self.masks[i].iter().map(|&b| u8::from(b)).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            planes.push((x_ref, Tensor::new(self.input_shape.clone(), self.input(i).to_vec())?));
        }
        w.flush()?;
        checkpoint::save(dir.join("planes.scl"), &planes)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, DatasetMeta)> {
        let dir = dir.as_ref();
        let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        let planes: HashMap<String, Tensor> = checkpoint::load(dir.join("planes.scl"))?.into_iter().collect();
        let mut ds = ConceptDataset {
            ids: vec![],
            input_shape: meta.input_shape.clone(),
            inputs: vec![],
            concepts: vec![],
            labels: vec![],
            masks: vec![],
            n_classes: meta.n_classes,
            schema: meta.schema.clone(),
        };
        let reader = BufReader::new(File::open(dir.join("dataset.jsonl"))?);
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| CoreError::Data(format!("dataset.jsonl line {}: {e}", line_no + 1)))?;
            let x = planes
                .get(&rec.x_ref)
                .ok_or_else(|| CoreError::Data(format!("missing input plane `{}`", rec.x_ref)))?;
            if x.shape() != meta.input_shape.as_slice() {
                return Err(CoreError::Data(format!("plane `{}` has shape {:?}", rec.x_ref, x.shape())));
            }
            ds.inputs.extend_from_slice(x.data());
            ds.ids.push(rec.id);
            ds.concepts.push(rec.c);
            ds.labels.push(rec.y);
            ds.masks.push(rec.mask.iter().map(|&b| b != 0).collect());
        }
        ds.validate()?;
        Ok((ds, meta))
    }
}
