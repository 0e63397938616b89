//! Dataset construction: MNIST ingestion, uncertain digit sums, soft-label
//! mappings and a categorical toy generator.

pub mod idx;
pub mod soft;
pub mod toy;
pub mod umnist;

pub use idx::{load_idx, parse_idx, IdxData, MnistStore};
pub use soft::{
    aggregate_population, coarse_to_soft, map_fourvalue, map_fourvalue_tokens, plausible_from_frequencies,
    ConfidenceMap, FourValue, SpreadMode,
};
pub use toy::{default_toy_schema, gen_categorical_toy, nearest_prototype, ToyConfig, ToyDataset};
pub use umnist::{gen_umnist, mix_digit, noise_concept, UmnistConfig};
