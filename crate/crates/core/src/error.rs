use std::fmt;

use serde::{Deserialize, Serialize};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("allocation error: {0}")]
    Allocation(String),
    #[error("plan validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// A single problem found by plan validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Dimensions {
        expected_layers: usize,
        expected_groups: usize,
        found_layers: usize,
        found_groups: Vec<usize>,
    },
    BelowFloor {
        layer: usize,
        group: usize,
        budget: usize,
        floor: usize,
    },
    Total {
        expected: usize,
        found: usize,
    },
    Compression {
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimensions {
                expected_layers,
                expected_groups,
                found_layers,
                found_groups,
            } => write!(
                f,
                "budget matrix is {found_layers}x{found_groups:?}, expected {expected_layers}x{expected_groups}"
            ),
            Violation::BelowFloor {
                layer,
                group,
                budget,
                floor,
            } => write!(
                f,
                "(layer {layer}, group {group}) budget {budget} below floor {floor}"
            ),
            Violation::Total { expected, found } => {
                write!(f, "budget total {found} differs from expected {expected}")
            }
            Violation::Compression { value } => {
                write!(f, "compression ratio {value} outside (0, 1]")
            }
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
