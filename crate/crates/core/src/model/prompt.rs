use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    /// Row of the polarity embedding table.
    pub fn index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }
}

/// A click in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
    pub polarity: Polarity,
}

impl PromptPoint {
    pub fn positive(x: usize, y: usize) -> Self {
        Self { x, y, polarity: Polarity::Positive }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self { x, y, polarity: Polarity::Negative }
    }

    pub fn check_bounds(&self, (h, w): (usize, usize)) -> Result<()> {
        if self.x >= w || self.y >= h {
            return Err(Error::InvalidPrompt(format!(
                "point ({}, {}) outside {w}×{h} image",
                self.x, self.y
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Visual prompt: an optional box (two corner rows) followed by points.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub bbox: Option<BoxPrompt>,
    pub points: Vec<PromptPoint>,
}

impl Prompt {
    pub fn points(points: Vec<PromptPoint>) -> Self {
        Self { bbox: None, points }
    }

    pub fn boxed(b: BoxPrompt) -> Self {
        Self { bbox: Some(b), points: Vec::new() }
    }

    /// Number of prompt rows `N`.
    pub fn rows(&self) -> usize {
        2 * self.bbox.is_some() as usize + self.points.len()
    }

    /// This prompt with `extra` points appended.
    pub fn extended(&self, extra: &[PromptPoint]) -> Self {
        let mut p = self.clone();
        p.points.extend_from_slice(extra);
        p
    }

    pub fn validate(&self, size: (usize, usize)) -> Result<()> {
        if self.rows() == 0 {
            return Err(Error::InvalidPrompt("prompt has no points".into()));
        }
        if let Some(b) = self.bbox {
            PromptPoint::positive(b.x0, b.y0).check_bounds(size)?;
            PromptPoint::positive(b.x1, b.y1).check_bounds(size)?;
        }
        self.points.iter().try_for_each(|p| p.check_bounds(size))
    }
}
