//! Concept bottleneck (CBM) and concept embedding (CEM) models trained on
//! hard or soft concept labels, test-time concept interventions with Random
//! and Skyline policies, and the metrics used to evaluate them.

pub mod annotation;
pub mod dataset;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod interventions;
pub mod model;
pub mod rng;
pub mod schema;

pub use annotation::{CoarseAnnotation, Confidence, SoftGroupAnnotation};
pub use dataset::{ConceptDataset, DatasetMeta};
pub use error::{CoreError, Result};
pub use rng::SeedStream;
pub use schema::{ConceptGroup, ConceptGroupSchema};
pub use model::{BottleneckConfig, ConceptModel, Interventions, Variant};
pub use interventions::{Granularity, InterventionSource, InterventionTrace, Policy};
