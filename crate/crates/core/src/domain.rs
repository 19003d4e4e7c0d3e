use serde::{Deserialize, Serialize};

/// Which side of the adaptation problem an image comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Binary domain label: 1 for source, 0 for target.
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 1,
            Domain::Target => 0,
        }
    }

    pub fn from_label(d: usize) -> Option<Self> {
        match d {
            1 => Some(Domain::Source),
            0 => Some(Domain::Target),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}
