use std::cmp::Ordering;

use super::anchors::{match_anchors, AnchorBox, AnchorLabel, AnchorTarget};
use super::model::ForwardOutput;
use super::truth::GroundTruth;
use crate::cfr::CfrTrace;
use crate::error::{Error, Result};
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
    /// Mined negatives per positive (at least this many when there are none).
    pub neg_pos_ratio: usize,
    /// Weight λ of the segmentation term.
    pub seg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            iou_pos: 0.5,
            iou_neg: 0.4,
            neg_pos_ratio: 3,
            seg_weight: 1.0,
        }
    }
}

/// The joint loss node plus its parts as plain numbers for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub classification: f64,
    pub regression: f64,
    /// Unweighted mean mask BCE; 0 when λ = 0 or there is no cycle.
    pub segmentation: f64,
}

impl LossTerms {
    pub fn detection(&self) -> f64 {
        self.classification + self.regression
    }
}

/// Classifier row labels after hard-negative mining: positives and the
/// `ratio · max(P, 1)` background anchors with the highest background loss.
/// Ties go to the lower anchor index.
pub fn mine_labels(targets: &[AnchorTarget], cls_rows: &[f64], k1: usize, ratio: usize) -> Vec<Option<usize>> {
    let mut labels = vec![None; targets.len()];
    let mut positives = 0;
    let mut background = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        match t.label {
            AnchorLabel::Positive(c) => {
                labels[i] = Some(c + 1);
                positives += 1;
            }
            AnchorLabel::Background => {
                let row = &cls_rows[i * k1..(i + 1) * k1];
                background.push((i, log_sum_exp(row) - row[0]));
            }
            AnchorLabel::Ignore => {}
        }
    }
    background.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    for &(i, _) in background.iter().take(ratio * positives.max(1)) {
        labels[i] = Some(0);
    }
    labels
}

pub fn match_batch(anchors: &[AnchorBox], gts: &[GroundTruth], cfg: &LossConfig) -> Result<Vec<Vec<AnchorTarget>>> {
    gts.iter()
        .map(|g| match_anchors(anchors, &g.boxes_with_classes(), cfg.iou_pos, cfg.iou_neg))
        .collect()
}

/// Mean sigmoid BCE over every loop and both spectra against the mask
/// downsampled to the logits' resolution.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &CfrTrace,
    gts: &[GroundTruth],
    factor: usize,
) -> Result<Var> {
    let mut target = Vec::new();
    for g in gts {
        target.extend(g.downsampled_mask(factor)?.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    let mut terms = Vec::new();
    for (&mt, &mv) in trace.mask_logits_t.iter().zip(&trace.mask_logits_v) {
        terms.push(tape.sigmoid_bce(mt, &target)?);
        terms.push(tape.sigmoid_bce(mv, &target)?);
    }
    tape.mean_of(&terms)
}

/// Detection loss (softmax cross-entropy over positives and mined negatives
/// plus smooth L1 on positives) + λ · segmentation loss.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    anchors: &[AnchorBox],
    gts: &[GroundTruth],
    mask_factor: usize,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if !(cfg.seg_weight >= 0.0) {
        return Err(Error::contract("joint_loss", "seg_weight must be >= 0"));
    }
    let cls_shape = tape.value(out.cls).shape().to_vec();
    let (n, a, k1) = (cls_shape[0], cls_shape[1], cls_shape[2]);
    if gts.len() != n || anchors.len() != a {
        return Err(Error::contract(
            "joint_loss",
            format!("{} truths / {} anchors for a batch of {n} with {a} anchors", gts.len(), anchors.len()),
        ));
    }
    let targets = match_batch(anchors, gts, cfg)?;
    let cls_vals: Vec<f64> = tape.value(out.cls).data().iter().map(|v| v.as_f64()).collect();
    let mut labels = Vec::with_capacity(n * a);
    let mut reg_target = Vec::with_capacity(n * a * 4);
    let mut reg_rows = Vec::with_capacity(n * a);
    for (b, t) in targets.iter().enumerate() {
        labels.extend(mine_labels(t, &cls_vals[b * a * k1..(b + 1) * a * k1], k1, cfg.neg_pos_ratio));
        for at in t {
            reg_rows.push(matches!(at.label, AnchorLabel::Positive(_)));
            reg_target.extend(at.offsets.iter().map(|&o| T::from_f64_lossy(o)));
        }
    }
    let ce = tape.softmax_ce(out.cls, &labels)?;
    let l1 = tape.smooth_l1(out.reg, &reg_target, &reg_rows)?;
    let det = tape.add(ce, l1)?;
    let classification = tape.value(ce).data()[0].as_f64();
    let regression = tape.value(l1).data()[0].as_f64();
    let (total, segmentation) = match &out.trace {
        Some(trace) if cfg.seg_weight > 0.0 => {
            let seg = segmentation_loss(tape, trace, gts, mask_factor)?;
            let v = tape.value(seg).data()[0].as_f64();
            let weighted = tape.mul_scalar(seg, cfg.seg_weight);
            (tape.add(det, weighted)?, v)
        }
        _ => (det, 0.0),
    };
    Ok(LossTerms {
        total,
        classification,
        regression,
        segmentation,
    })
}
