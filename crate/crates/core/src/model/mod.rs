//! CBM and CEM models, joint training and checkpoints.

mod accuracy;
mod config;
mod io;
mod network;
mod train;

pub use accuracy::{concept_accuracy, concept_accuracy_from, task_accuracy};
pub use config::{BackboneSpec, BottleneckConfig, PaddingMode, Variant};
pub use io::{sidecar_path, ModelSidecar, SIDECAR_FORMAT};
pub use network::{Batch, ConceptModel, Forward, Interventions, LossPart, Mode, RunningStats};
pub use train::{class_weights, evaluate_loss, split_indices, train, EpochRecord, TrainConfig, TrainingHistory};
