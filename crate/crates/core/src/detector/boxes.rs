use std::cmp::Ordering;

/// Axis-aligned box in pixel coordinates, half-open: covers `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Pixel `(x, y)` belongs to the box when its centre lies inside.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px >= self.x1 && px < self.x2 && py >= self.y1 && py < self.y2
    }
}

/// Regression offsets of `gt` relative to `anchor`: centre shift over anchor
/// size and log size ratios.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

pub fn decode(offsets: &[f64; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    // clamp the log ratios so a wild prediction cannot overflow
    let w = aw * offsets[2].clamp(-10.0, 10.0).exp();
    let h = ah * offsets[3].clamp(-10.0, 10.0).exp();
    BBox::from_center(ax + offsets[0] * aw, ay + offsets[1] * ah, w, h)
}

/// Greedy non-maximum suppression over `(box, score, tie_key)` candidates.
/// Candidates are visited by descending score, ties by ascending `tie_key`;
/// a candidate is dropped when its IoU with a kept box exceeds `iou_threshold`.
/// Returns indices into `candidates` in keep order.
pub fn nms(candidates: &[(BBox, f64, usize)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .unwrap_or(Ordering::Equal)
            .then(candidates[a].2.cmp(&candidates[b].2))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let b = &candidates[i].0;
        if keep.iter().all(|&k| candidates[k].0.iou(b) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}
