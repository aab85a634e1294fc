use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub const EXPR_CLASSES: usize = 8;
pub const AU_COUNT: usize = 12;

/// Expression class names, in label-id order.
pub const EXPR_NAMES: [&str; EXPR_CLASSES] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Valence-arousal regression, two outputs in [-1, 1].
    Va,
    /// Eight-way expression classification.
    Expr,
    /// Twelve-way multi-label action-unit detection.
    Au,
}

impl Task {
    pub fn head_out(self) -> usize {
        match self {
            Task::Va => 2,
            Task::Expr => EXPR_CLASSES,
            Task::Au => AU_COUNT,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Va => "VA",
            Task::Expr => "EXPR",
            Task::Au => "AU",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VA" => Ok(Task::Va),
            "EXPR" => Ok(Task::Expr),
            "AU" => Ok(Task::Au),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}
