use std::fmt;

use serde::{Deserialize, Serialize};

/// Which of the two domains a sample (and a normalization call) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Source,
    Target,
}

impl DomainId {
    pub const ALL: [DomainId; 2] = [DomainId::Source, DomainId::Target];

    pub fn index(self) -> usize {
        match self {
            DomainId::Source => 0,
            DomainId::Target => 1,
        }
    }

    /// Short tag used in checkpoint keys.
    pub fn tag(self) -> &'static str {
        match self {
            DomainId::Source => "S",
            DomainId::Target => "T",
        }
    }

    pub fn other(self) -> DomainId {
        match self {
            DomainId::Source => DomainId::Target,
            DomainId::Target => DomainId::Source,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::Source => f.write_str("source"),
            DomainId::Target => f.write_str("target"),
        }
    }
}
