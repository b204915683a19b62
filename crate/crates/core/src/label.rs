use std::fmt;

use serde::{Deserialize, Serialize};

/// Next-day direction. `Long` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Long,
    Short,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Long => "Long",
            Label::Short => "Short",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Long" => Some(Label::Long),
            "Short" => Some(Label::Short),
            _ => None,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Long => Label::Short,
            Label::Short => Label::Long,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A model answer after mapping free text back onto the label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prediction {
    Label(Label),
    ParseFailure,
}

impl From<Label> for Prediction {
    fn from(l: Label) -> Self {
        Prediction::Label(l)
    }
}
