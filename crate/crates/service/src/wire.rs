//! JSON payloads. Every number crosses the wire as decimal text so clients
//! never lose precision to a float parser; requests also accept plain JSON
//! integers for convenience.

use serde::{Deserialize, Serialize};

/// An integer given either as a JSON number or as decimal text.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum IntText {
    Int(i64),
    Text(String),
}

impl IntText {
    pub fn parse(&self, field: &str) -> Result<i64, String> {
        match self {
            IntText::Int(v) => Ok(*v),
            IntText::Text(s) => s
                .trim()
                .parse()
                .map_err(|_| format!("{field} must be an integer, got {s:?}")),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct OpenRequest {
    pub user: IntText,
}

#[derive(Debug, Deserialize)]
pub struct CritiqueRequest {
    pub keyphrase: IntText,
    pub eta: IntText,
}

#[derive(Debug, Deserialize)]
pub struct LabelQuery {
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub keyphrase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListedItem {
    pub rank: String,
    /// Item entity id.
    pub item: String,
    pub score: String,
    pub explanations: Vec<Explanation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDelta {
    pub item: String,
    pub before: String,
    pub after: String,
    pub delta: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session: String,
    pub user: String,
    pub created_at: String,
    pub round: String,
    pub items: Vec<ListedItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritiqueResponse {
    pub session: String,
    pub round: String,
    pub items: Vec<ListedItem>,
    /// Score change of every item listed before this critique.
    pub deltas: Vec<ScoreDelta>,
    pub warning: Option<String>,
    pub loss: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritiqueEcho {
    pub keyphrase: String,
    pub eta: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: String,
    pub user: String,
    pub created_at: String,
    pub round: String,
    pub critiques: Vec<CritiqueEcho>,
    /// Euclidean distance of the session's user embedding from the prior.
    pub drift: String,
    pub idle_seconds: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyphraseEntry {
    pub keyphrase: String,
    pub label: String,
    pub degree: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
