use serde::{Deserialize, Serialize};

use crate::data::synth::SyntheticFactors;
use crate::error::{LamaeError, Result};

/// 8-bit grayscale frame, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(LamaeError::Data(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }
}

/// Which partition a study belongs to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(LamaeError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One examination: several videos (views) of frames plus optional targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    pub split: Split,
    pub views: Vec<Vec<Frame>>,
    pub labels: Option<Vec<f64>>,
    pub target: Option<f64>,
    pub factors: Option<SyntheticFactors>,
}

impl Study {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(LamaeError::Data(format!("study {} has no views", self.id)));
        }
        for (j, view) in self.views.iter().enumerate() {
            let first = view
                .first()
                .ok_or_else(|| LamaeError::Data(format!("study {} view {j} has no frames", self.id)))?;
            if view.iter().any(|f| f.width != first.width || f.height != first.height) {
                return Err(LamaeError::Data(format!(
                    "study {} view {j}: frames differ in size",
                    self.id
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(LamaeError::Data(format!("study {}: labels must be 0 or 1", self.id)));
            }
        }
        if self.target.is_some_and(|t| !t.is_finite()) {
            return Err(LamaeError::Data(format!("study {}: non-finite target", self.id)));
        }
        Ok(())
    }

    pub fn view_lengths(&self) -> Vec<usize> {
        self.views.iter().map(Vec::len).collect()
    }
}
