//! Image samples, the synthetic benchmark generator and the line-delimited
//! dataset and detection file formats.

mod generate;
mod io;

pub use generate::{generate, generate_with_provenance, GeneratedSplit, ProposalKind, SceneSpec};
pub use io::{load_dataset, load_detections, save_dataset, save_detections, DatasetHeader, DetectionRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::Matrix;

/// Ground-truth object. `class_id` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One image: class-presence labels, proposals with their raw features,
/// and (evaluation only) ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image_id: String,
    /// `labels[c]` is true iff class `c` (0-based) occurs in the image.
    pub labels: Vec<bool>,
    pub proposals: Vec<BBox>,
    /// `|R| × D_raw`.
    pub features: Matrix,
    gt: Option<Vec<GtBox>>,
}

/// What the training path is allowed to see of a sample.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub labels: &'a [bool],
    pub proposals: &'a [BBox],
    pub features: &'a Matrix,
}

impl ImageSample {
    pub fn new(
        image_id: impl Into<String>,
        labels: Vec<bool>,
        proposals: Vec<BBox>,
        features: Matrix,
        gt: Option<Vec<GtBox>>,
    ) -> Result<Self> {
        let s = ImageSample { image_id: image_id.into(), labels, proposals, features, gt };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.proposals.is_empty() {
            return Err(Error::InvalidConfig(format!("image {} has no proposals", self.image_id)));
        }
        if self.features.rows() != self.proposals.len() {
            return Err(Error::ShapeMismatch {
                op: "ImageSample",
                left: format!("{} proposals", self.proposals.len()),
                right: self.features.shape_str(),
            });
        }
        if let Some(b) = self.proposals.iter().find(|b| !b.is_valid()) {
            return Err(Error::InvalidConfig(format!("image {}: invalid box {b:?}", self.image_id)));
        }
        if let Some(gt) = &self.gt {
            if let Some(g) = gt.iter().find(|g| g.class_id == 0 || g.class_id > self.labels.len()) {
                return Err(Error::InvalidConfig(format!(
                    "image {}: gt class {} outside 1..={}",
                    self.image_id,
                    g.class_id,
                    self.labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn has_positive_label(&self) -> bool {
        self.labels.iter().any(|&l| l)
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { labels: &self.labels, proposals: &self.proposals, features: &self.features }
    }

    /// Ground truth, for evaluation code only.
    pub fn ground_truth(&self) -> Option<&[GtBox]> {
        self.gt.as_deref()
    }

    pub fn without_ground_truth(mut self) -> Self {
        self.gt = None;
        self
    }
}
