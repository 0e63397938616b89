//! Human concept annotations: coarse confidence tags and elicited soft masses.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::schema::ConceptGroupSchema;

/// Discrete confidence attached to a coarse annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Guessing,
    Probably,
    Definitely,
}

impl std::str::FromStr for Confidence {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "guessing" => Ok(Self::Guessing),
            "probably" => Ok(Self::Probably),
            "definitely" => Ok(Self::Definitely),
            other => Err(CoreError::Data(format!("unknown confidence level `{other}`"))),
        }
    }
}

/// One binary on/off marking over a concept group plus a confidence tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseAnnotation {
    pub group: usize,
    pub on_bits: Vec<bool>,
    pub omega: Confidence,
}

/// One annotator's probability mass (0..=100 per attribute) over a concept group.
///
/// Total mass is kept as given; annotators are free to assign more or less than 100.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftGroupAnnotation {
    pub annotator_id: String,
    pub stimulus_id: String,
    pub group_id: String,
    pub mass: BTreeMap<String, u32>,
    #[serde(default)]
    pub not_visible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

pub const MAX_MASS: u32 = 100;

impl SoftGroupAnnotation {
    pub fn total_mass(&self) -> u32 {
        self.mass.values().sum()
    }

    /// Checks masses are within `0..=100` and, given a schema, that every attribute exists.
    /// The error names the offending field.
    pub fn validate(&self, schema: Option<&ConceptGroupSchema>) -> std::result::Result<(), (String, String)> {
        for (attr, &m) in &self.mass {
            if m > MAX_MASS {
                return Err((format!("mass.{attr}"), format!("mass {m} exceeds {MAX_MASS}")));
            }
        }
        if let Some(schema) = schema {
            let Some(g) = schema.group_index(&self.group_id) else {
                return Err(("group_id".into(), format!("unknown concept group `{}`", self.group_id)));
            };
            for attr in self.mass.keys() {
                if !schema.group(g).attributes.contains(attr) {
                    return Err((format!("mass.{attr}"), format!("`{attr}` is not an attribute of `{}`", self.group_id)));
                }
            }
        }
        Ok(())
    }

    /// `(concept index, mass / 100)` for every attribute present in the mass map.
    pub fn concept_values(&self, schema: &ConceptGroupSchema) -> Result<Vec<(usize, f64)>> {
        self.mass
            .iter()
            .map(|(attr, &m)| {
                let idx = schema
                    .concept_index(&self.group_id, attr)
                    .ok_or_else(|| CoreError::Data(format!("unknown concept `{}::{attr}`", self.group_id)))?;
                Ok((idx, f64::from(m.min(MAX_MASS)) / 100.0))
            })
            .collect()
    }
}
