//! Scored circle detections and per-model detection sets.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Circle;

pub const DEFAULT_LABEL: &str = "glomerulus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub circle: Circle,
    pub score: f64,
    pub model_id: String,
    pub label: String,
}

impl Detection {
    pub fn new(circle: Circle, score: f64, model_id: impl Into<String>) -> Self {
        Self {
            circle,
            score,
            model_id: model_id.into(),
            label: DEFAULT_LABEL.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.circle.validate()?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }
}

/// Total order used everywhere detections are ranked: score descending, then
/// cx, cy, r ascending, then model id and label.
pub fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.circle.cx.total_cmp(&b.circle.cx))
        .then_with(|| a.circle.cy.total_cmp(&b.circle.cy))
        .then_with(|| a.circle.r.total_cmp(&b.circle.r))
        .then_with(|| a.model_id.cmp(&b.model_id))
        .then_with(|| a.label.cmp(&b.label))
}

pub fn sort_canonical(dets: &mut [Detection]) {
    dets.sort_by(canonical_cmp);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunSource {
    File,
    Remote,
    Synthetic,
}

/// All slide-space detections produced by one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub model_id: String,
    pub detections: Vec<Detection>,
    pub source: RunSource,
}

impl ModelRun {
    pub fn new(model_id: impl Into<String>, detections: Vec<Detection>, source: RunSource) -> Self {
        Self {
            model_id: model_id.into(),
            detections,
            source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            if d.model_id != self.model_id {
                return Err(Error::Validation(format!(
                    "detection {i} carries model id `{}` inside run `{}`",
                    d.model_id, self.model_id
                )));
            }
            d.validate()
                .map_err(|e| Error::Validation(format!("run `{}` detection {i}: {e}", self.model_id)))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}
