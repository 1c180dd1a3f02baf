//! Segmentation prompts and the category-to-concept mapping used for
//! text-prompted segmenters.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, DefectCategory};

/// Visually descriptive concepts a promptable segmenter understands better
/// than the technical class name.
pub fn prompt_map(category: DefectCategory) -> &'static [&'static str] {
    match category {
        DefectCategory::Vegetation => &["plant"],
        DefectCategory::Contaminant => &["rubbish"],
        DefectCategory::DegradedPlaster => &["peeling"],
        DefectCategory::RustStain => &["stain"],
        DefectCategory::Spalling => &["hole", "peeling", "stain"],
        // Cracks go to dedicated crack segmenters; the concept is kept for completeness.
        DefectCategory::Crack => &["crack"],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Bbox,
    Points,
    Text,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::Bbox, PromptMode::Points, PromptMode::Text];

    /// Candidate label used when prompt modes compete in adjudication.
    pub fn label(self) -> &'static str {
        match self {
            PromptMode::Bbox => "bbox-prompt",
            PromptMode::Points => "points-prompt",
            PromptMode::Text => "text-prompt",
        }
    }
}

/// Prompt for a promptable segmenter; exactly one payload is populated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SegmentPrompt {
    Bbox { boxes: Vec<BoundingBox> },
    Points { points: Vec<[f64; 2]> },
    Text { concepts: Vec<String> },
}

impl SegmentPrompt {
    pub fn mode(&self) -> PromptMode {
        match self {
            SegmentPrompt::Bbox { .. } => PromptMode::Bbox,
            SegmentPrompt::Points { .. } => PromptMode::Points,
            SegmentPrompt::Text { .. } => PromptMode::Text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = match self {
            SegmentPrompt::Bbox { boxes } => boxes.is_empty(),
            SegmentPrompt::Points { points } => points.is_empty(),
            SegmentPrompt::Text { concepts } => concepts.is_empty(),
        };
        if empty {
            return Err(Error::Empty("prompt payload"));
        }
        Ok(())
    }

    /// Builds the prompt of `mode` for one anchored detection: the box
    /// itself, its center point, or the mapped concepts.
    pub fn for_detection(mode: PromptMode, anchor: &BoundingBox, category: DefectCategory) -> Self {
        match mode {
            PromptMode::Bbox => SegmentPrompt::Bbox { boxes: alloc::vec![*anchor] },
            PromptMode::Points => {
                let (cx, cy) = anchor.center();
                SegmentPrompt::Points { points: alloc::vec![[cx, cy]] }
            }
            PromptMode::Text => SegmentPrompt::Text {
                concepts: prompt_map(category).iter().map(|s| String::from(*s)).collect(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concept_table() {
        assert_eq!(prompt_map(DefectCategory::DegradedPlaster), ["peeling"]);
        assert_eq!(prompt_map(DefectCategory::Spalling), ["hole", "peeling", "stain"]);
        assert_eq!(prompt_map(DefectCategory::Vegetation), ["plant"]);
        assert_eq!(prompt_map(DefectCategory::Contaminant), ["rubbish"]);
        assert_eq!(prompt_map(DefectCategory::RustStain), ["stain"]);
    }

    #[test]
    fn prompt_payload_checks() {
        assert!(SegmentPrompt::Text { concepts: alloc::vec![] }.validate().is_err());
        let b = BoundingBox::new(2., 2., 4., 6.).unwrap();
        let p = SegmentPrompt::for_detection(PromptMode::Points, &b, DefectCategory::Crack);
        assert_eq!(p, SegmentPrompt::Points { points: alloc::vec![[4.0, 5.0]] });
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"mode":"points","points":[[4.0,5.0]]}"#);
    }
}
