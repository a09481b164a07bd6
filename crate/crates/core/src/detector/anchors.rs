use super::boxes::{encode, BBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub layer: usize,
    pub scale: f64,
    /// `w / h`.
    pub ratio: f64,
}

impl AnchorBox {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Anchors for every detection layer. Order: layer, then cell (row-major),
/// then scale, then ratio, which matches the head's slot layout.
pub fn generate_anchors(
    image_width: usize,
    image_height: usize,
    layer_strides: &[usize],
    scales: &[Vec<f64>],
    ratios: &[f64],
) -> Result<Vec<AnchorBox>> {
    if layer_strides.len() != scales.len() {
        return Err(Error::contract(
            "generate_anchors",
            "need one scale list per detection layer",
        ));
    }
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::contract("generate_anchors", "ratios must be positive"));
    }
    let mut out = Vec::new();
    for (layer, (&stride, layer_scales)) in layer_strides.iter().zip(scales).enumerate() {
        if stride == 0 || !image_width.is_multiple_of(stride) || !image_height.is_multiple_of(stride) {
            return Err(Error::contract(
                "generate_anchors",
                format!("stride {stride} does not divide {image_width}x{image_height}"),
            ));
        }
        if layer_scales.is_empty() || layer_scales.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract(
                "generate_anchors",
                format!("scales of layer {layer} must be non-empty and ascending"),
            ));
        }
        let s = stride as f64;
        for gy in 0..image_height / stride {
            for gx in 0..image_width / stride {
                for &scale in layer_scales {
                    for &ratio in ratios {
                        let root = ratio.sqrt();
                        out.push(AnchorBox {
                            cx: (gx as f64 + 0.5) * s,
                            cy: (gy as f64 + 0.5) * s,
                            w: scale * root,
                            h: scale / root,
                            layer,
                            scale,
                            ratio,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Background,
    /// Object class id (0-based; the classifier's row uses `class + 1`).
    Positive(usize),
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    pub offsets: [f64; 4],
    pub iou: f64,
}

/// Label anchors against ground truth `(box, class)` pairs.
///
/// IoU ≥ `pos` → positive, IoU < `neg` → background, otherwise ignored.
/// Every ground-truth box also claims its best-overlapping anchor (lowest
/// index on ties).
pub fn match_anchors(
    anchors: &[AnchorBox],
    gt: &[(BBox, usize)],
    pos: f64,
    neg: f64,
) -> Result<Vec<AnchorTarget>> {
    if pos < neg {
        return Err(Error::contract(
            "match_anchors",
            format!("positive threshold {pos} below negative threshold {neg}"),
        ));
    }
    let boxes: Vec<BBox> = anchors.iter().map(AnchorBox::bbox).collect();
    let mut best: Vec<(f64, Option<usize>)> = vec![(0.0, None); anchors.len()];
    for (ai, ab) in boxes.iter().enumerate() {
        for (gi, (g, _)) in gt.iter().enumerate() {
            let iou = ab.iou(g);
            if iou > best[ai].0 {
                best[ai] = (iou, Some(gi));
            }
        }
    }
    let mut forced: Vec<Option<usize>> = vec![None; anchors.len()];
    for (gi, (g, _)) in gt.iter().enumerate() {
        let mut top: Option<(usize, f64)> = None;
        for (ai, ab) in boxes.iter().enumerate() {
            let iou = ab.iou(g);
            if iou > 0.0 && top.is_none_or(|(_, t)| iou > t) {
                top = Some((ai, iou));
            }
        }
        if let Some((ai, _)) = top {
            forced[ai] = Some(gi);
        }
    }
    Ok(boxes
        .iter()
        .enumerate()
        .map(|(ai, ab)| {
            let (iou, gi) = match forced[ai] {
                Some(g) => (ab.iou(&gt[g].0), Some(g)),
                None => best[ai],
            };
            let positive = forced[ai].is_some() || (gi.is_some() && iou >= pos);
            match gi {
                Some(g) if positive => AnchorTarget {
                    label: AnchorLabel::Positive(gt[g].1),
                    offsets: encode(&gt[g].0, ab),
                    iou,
                },
                _ if iou < neg => AnchorTarget {
                    label: AnchorLabel::Background,
                    offsets: [0.0; 4],
                    iou,
                },
                _ => AnchorTarget {
                    label: AnchorLabel::Ignore,
                    offsets: [0.0; 4],
                    iou,
                },
            }
        })
        .collect())
}
