use serde::{Deserialize, Serialize};

/// Modality of an atomic edit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Textual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Visual,
    Textual,
    Compositional,
}

impl From<Modality> for QueryType {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Visual => QueryType::Visual,
            Modality::Textual => QueryType::Textual,
        }
    }
}
