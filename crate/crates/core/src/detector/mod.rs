//! Miniature two-stage detector.

pub mod anchors;
pub mod bbox;
pub mod loss;
pub mod net;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use anchors::generate_anchors;
pub use bbox::{decode, encode, iou, nms, BBox};
pub use loss::{assign, detection_loss, Assignment, DetectionLoss};
pub use net::{
    postprocess, roi_pool, select_proposals, BackboneFeatures, Detection, Detector, DetectorConfig, HeadOutput,
    ImageForward, RpnOutput, FEATURE_STRIDE,
};

/// Ground truth for one image. Labels are object classes in `0..K`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl Annotation {
    pub fn new(boxes: Vec<BBox>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} boxes but {} labels",
                boxes.len(),
                labels.len()
            )));
        }
        if let Some(bad) = boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::InvalidArgument(format!("degenerate box {bad:?}")));
        }
        Ok(Self { boxes, labels })
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}
