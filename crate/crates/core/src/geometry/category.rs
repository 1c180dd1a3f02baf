use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The six facade defect classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectCategory {
    Crack,
    Spalling,
    RustStain,
    DegradedPlaster,
    Vegetation,
    Contaminant,
}

impl DefectCategory {
    pub const ALL: [DefectCategory; 6] = [
        DefectCategory::Crack,
        DefectCategory::Spalling,
        DefectCategory::RustStain,
        DefectCategory::DegradedPlaster,
        DefectCategory::Vegetation,
        DefectCategory::Contaminant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectCategory::Crack => "crack",
            DefectCategory::Spalling => "spalling",
            DefectCategory::RustStain => "rust_stain",
            DefectCategory::DegradedPlaster => "degraded_plaster",
            DefectCategory::Vegetation => "vegetation",
            DefectCategory::Contaminant => "contaminant",
        }
    }

    /// Short human description used in adjudication prompts.
    pub fn gloss(self) -> &'static str {
        match self {
            DefectCategory::Crack => "thin elongated fracture lines in concrete or render",
            DefectCategory::Spalling => "surface concrete flaking or breaking away, leaving irregular patches",
            DefectCategory::RustStain => "orange-brown discoloration from corroding steel",
            DefectCategory::DegradedPlaster => "peeling, blistered or detached plaster finish",
            DefectCategory::Vegetation => "plants or moss growing on the facade",
            DefectCategory::Contaminant => "dirt, debris or rubbish deposited on the surface",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DefectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefectCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DefectCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown category {s}")))
    }
}
