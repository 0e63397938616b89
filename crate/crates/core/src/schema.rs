use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{CoreError, Result};

/// A categorical concept family and its binary attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub name: String,
    pub attributes: Vec<String>,
}

/// Ordered concept groups. Binary concepts are numbered group by group, so
/// group `g` owns a contiguous index range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ConceptGroup>", into = "Vec<ConceptGroup>")]
pub struct ConceptGroupSchema {
    groups: Vec<ConceptGroup>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<ConceptGroup>> for ConceptGroupSchema {
    type Error = CoreError;
    fn try_from(groups: Vec<ConceptGroup>) -> Result<Self> {
        Self::new(groups)
    }
}

impl From<ConceptGroupSchema> for Vec<ConceptGroup> {
    fn from(s: ConceptGroupSchema) -> Self {
        s.groups
    }
}

/// Separator between group and attribute in a concept's full name.
pub const NAME_SEP: &str = "::";

impl ConceptGroupSchema {
    pub fn new(groups: Vec<ConceptGroup>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut total = 0;
        for (gi, g) in groups.iter().enumerate() {
            if g.attributes.is_empty() {
                return Err(CoreError::Param(format!("concept group `{}` is empty", g.name)));
            }
            if groups[..gi].iter().any(|o| o.name == g.name) {
                return Err(CoreError::Param(format!("duplicate group name `{}`", g.name)));
            }
            for (i, a) in g.attributes.iter().enumerate() {
                if g.attributes[..i].contains(a) {
                    return Err(CoreError::Param(format!("duplicate attribute `{a}` in group `{}`", g.name)));
                }
            }
            offsets.push(total);
            total += g.attributes.len();
        }
        offsets.push(total);
        Ok(Self { groups, offsets })
    }

    /// Convenience constructor from `(group, [attributes])` pairs.
    pub fn from_pairs<G: Into<String>, A: Into<String>>(pairs: impl IntoIterator<Item = (G, Vec<A>)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(g, attrs)| ConceptGroup {
                    name: g.into(),
                    attributes: attrs.into_iter().map(Into::into).collect(),
                })
                .collect(),
        )
    }

    /// `p` single-attribute groups `digit_i` with attribute `one`.
    pub fn digits(p: usize) -> Self {
        Self::from_pairs((0..p).map(|i| (format!("digit_{i}"), vec!["one"]))).expect("valid by construction")
    }

    /// Total number of binary concepts.
    pub fn k(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[ConceptGroup] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &ConceptGroup {
        &self.groups[g]
    }

    pub fn group_range(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Group owning concept `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.offsets.partition_point(|&o| o <= i) - 1
    }

    pub fn concept_name(&self, i: usize) -> String {
        let g = self.group_of(i);
        format!("{}{NAME_SEP}{}", self.groups[g].name, self.groups[g].attributes[i - self.offsets[g]])
    }

    pub fn concept_names(&self) -> Vec<String> {
        (0..self.k()).map(|i| self.concept_name(i)).collect()
    }

    pub fn concept_index(&self, group: &str, attribute: &str) -> Option<usize> {
        let g = self.group_index(group)?;
        let a = self.groups[g].attributes.iter().position(|x| x == attribute)?;
        Some(self.offsets[g] + a)
    }

    /// Resolves `group::attribute`.
    pub fn index_of(&self, full_name: &str) -> Option<usize> {
        let (g, a) = full_name.split_once(NAME_SEP)?;
        self.concept_index(g, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_group_major() {
        let s = ConceptGroupSchema::from_pairs([("wing", vec!["blue", "red"]), ("beak", vec!["dagger", "pointed", "rounded"])]).unwrap();
        assert_eq!(s.k(), 5);
        assert_eq!(s.group_range(1), 2..5);
        assert_eq!(s.group_of(1), 0);
        assert_eq!(s.group_of(2), 1);
        assert_eq!(s.concept_name(3), "beak::pointed");
        assert_eq!(s.index_of("beak::rounded"), Some(4));
        assert_eq!(s.index_of("beak::blue"), None);
    }

    #[test]
    fn rejects_empty_groups_and_duplicates() {
        assert!(ConceptGroupSchema::from_pairs([("a", Vec::<String>::new())]).is_err());
        assert!(ConceptGroupSchema::from_pairs([("a", vec!["x", "x"])]).is_err());
        assert!(ConceptGroupSchema::from_pairs([("a", vec!["x"]), ("a", vec!["y"])]).is_err());
    }

    #[test]
    fn serde_roundtrip_validates() {
        let s = ConceptGroupSchema::digits(3);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ConceptGroupSchema>(&json).unwrap(), s);
        assert!(serde_json::from_str::<ConceptGroupSchema>(r#"[{"name":"g","attributes":[]}]"#).is_err());
    }
}
