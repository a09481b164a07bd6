//! Two-stream detector hosting the fusion block, with anchors, matching,
//! the joint loss and augmentation.

pub mod anchors;
pub mod augment;
pub mod boxes;
pub mod detect;
pub mod loss;
pub mod model;
pub mod truth;

pub use anchors::{generate_anchors, match_anchors, AnchorBox, AnchorLabel, AnchorTarget};
pub use boxes::{decode, encode, nms, BBox};
pub use detect::{decode_detections, Batch, DetectConfig, Detector, Prediction, StepStats};
pub use loss::{joint_loss, LossConfig, LossTerms};
pub use model::{BackboneConfig, DetectorConfig, FusionMode, Network, Spectrum};
pub use truth::{downsample_mask, rasterize_boxes, GroundTruth, GtObject, Visibility};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}
