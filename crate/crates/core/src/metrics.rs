//! Mask overlap, detection accuracy and timing measurements. Everything is
//! computed in `f64`.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::detector::{BBox, Detection};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `2|A∩B| / (|A|+|B|)` over pixels above 0.5; two empty masks score 1.
pub fn dice_score(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(
            "dice_score",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        na += u64::from(x);
        nb += u64::from(y);
        both += u64::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Binary mask from logits: `sigmoid(x) > 0.5`, i.e. `x > 0`.
pub fn binarize_logits(logits: &Tensor<f32>) -> Tensor<f32> {
    logits.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Ground truth of one image for scoring: boxes with class ids.
pub type ImageTruth = Vec<(BBox, usize)>;

/// Detections across images in descending confidence; ties keep the image
/// order and each image's own order.
fn ranked(dets: &[Vec<Detection>], class: Option<usize>) -> Vec<(usize, &Detection)> {
    let mut all: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |d| (i, d)))
        .filter(|(_, d)| class.is_none_or(|c| d.class_id == c))
        .collect();
    all.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap_or(Ordering::Equal));
    all
}

/// Best-IoU unclaimed box among `candidates` with IoU ≥ `thr`.
fn best_match(det: &BBox, candidates: &[(BBox, bool)], thr: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (g, taken)) in candidates.iter().enumerate() {
        if *taken {
            continue;
        }
        let iou = det.iou(g);
        if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
            best = Some((k, iou));
        }
    }
    best.map(|(k, _)| k)
}

/// Area under the precision/recall curve with all-points interpolation for
/// one class. `None` when the class has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[ImageTruth], class: usize, iou_threshold: f64) -> Option<f64> {
    let total: usize = gts.iter().map(|g| g.iter().filter(|(_, c)| *c == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut pools: Vec<Vec<(BBox, bool)>> = gts
        .iter()
        .map(|g| g.iter().filter(|(_, c)| *c == class).map(|(b, _)| (*b, false)).collect())
        .collect();
    let mut tp = 0usize;
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for (k, (img, d)) in ranked(dets, Some(class)).into_iter().enumerate() {
        if let Some(pool) = pools.get_mut(img) {
            if let Some(m) = best_match(&d.bbox, pool, iou_threshold) {
                pool[m].1 = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total as f64);
    }
    // precision envelope from the right, then sum over recall steps
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    Some(ap)
}

/// Per-class AP and their mean over the classes that have ground truth.
pub fn mean_average_precision(
    dets: &[Vec<Detection>],
    gts: &[ImageTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(dets, gts, c, iou_threshold))
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per, mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissRateConfig {
    /// Ground truth shorter than this is ignored: neither a miss nor a
    /// source of false positives.
    pub min_height: f64,
    pub fppi_grid: Vec<f64>,
    pub iou_threshold: f64,
}

/// Nine log-spaced points from 1e-2 to 1.
pub fn default_fppi_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powf(-2.0 + i as f64 * 0.25)).collect()
}

/// Pedestrian "reasonable" height floor (55 px at 512 px image height),
/// scaled to `image_height`.
pub fn reasonable_min_height(image_height: usize) -> f64 {
    55.0 / 512.0 * image_height as f64
}

impl MissRateConfig {
    pub fn for_image_height(image_height: usize) -> Self {
        Self {
            min_height: reasonable_min_height(image_height),
            fppi_grid: default_fppi_grid(),
            iou_threshold: 0.5,
        }
    }
}

/// Operating points `(fppi, miss_rate)` from the strictest threshold
/// (no detections) downwards. `None` when no ground truth survives the
/// height filter.
pub fn miss_rate_curve(dets: &[Vec<Detection>], gts: &[ImageTruth], cfg: &MissRateConfig) -> Option<Vec<(f64, f64)>> {
    let mut pools: Vec<Vec<(BBox, bool)>> = Vec::new();
    let mut ignored: Vec<Vec<BBox>> = Vec::new();
    for g in gts {
        let (keep, skip): (Vec<_>, Vec<_>) = g.iter().map(|(b, _)| *b).partition(|b| b.height() >= cfg.min_height);
        pools.push(keep.into_iter().map(|b| (b, false)).collect());
        ignored.push(skip);
    }
    let total: usize = pools.iter().map(Vec::len).sum();
    if total == 0 {
        return None;
    }
    let images = gts.len().max(dets.len()).max(1) as f64;
    let mut curve = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (img, d) in ranked(dets, None) {
        let pool = match pools.get_mut(img) {
            Some(p) => p,
            None => {
                fp += 1;
                curve.push((fp as f64 / images, 1.0 - tp as f64 / total as f64));
                continue;
            }
        };
        if let Some(m) = best_match(&d.bbox, pool, cfg.iou_threshold) {
            pool[m].1 = true;
            tp += 1;
        } else if ignored[img].iter().any(|g| d.bbox.iou(g) >= cfg.iou_threshold) {
            continue;
        } else {
            fp += 1;
        }
        curve.push((fp as f64 / images, 1.0 - tp as f64 / total as f64));
    }
    Some(curve)
}

/// Miss rate at the loosest operating point whose FPPI does not exceed
/// `fppi`.
pub fn miss_rate_at(curve: &[(f64, f64)], fppi: f64) -> f64 {
    curve
        .iter()
        .filter(|(f, _)| *f <= fppi)
        .map(|(_, m)| *m)
        .fold(1.0, f64::min)
}

/// Geometric mean of the miss rate over the FPPI grid. A zero miss rate at
/// any grid point makes the result 0.
pub fn log_average_miss_rate(dets: &[Vec<Detection>], gts: &[ImageTruth], cfg: &MissRateConfig) -> Option<f64> {
    let curve = miss_rate_curve(dets, gts, cfg)?;
    if cfg.fppi_grid.is_empty() {
        return None;
    }
    let mean_ln = cfg.fppi_grid.iter().map(|&f| miss_rate_at(&curve, f).ln()).sum::<f64>() / cfg.fppi_grid.len() as f64;
    Some(mean_ln.exp())
}

/// Recall (one minus miss rate) at a given FPPI.
pub fn recall_at_fppi(dets: &[Vec<Detection>], gts: &[ImageTruth], cfg: &MissRateConfig, fppi: f64) -> Option<f64> {
    miss_rate_curve(dets, gts, cfg).map(|c| 1.0 - miss_rate_at(&c, fppi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub median_ms: f64,
    /// Interquartile range.
    pub iqr_ms: f64,
    pub mean_ms: f64,
    pub iterations: usize,
}

pub const MIN_WARMUP: usize = 5;
pub const MIN_MEASURED: usize = 50;

pub fn check_timing_budget(warmup: usize, iterations: usize) -> Result<()> {
    if warmup < MIN_WARMUP || iterations < MIN_MEASURED {
        return Err(Error::contract(
            "timing_profile",
            format!("need >= {MIN_WARMUP} warmup and >= {MIN_MEASURED} measured iterations"),
        ));
    }
    Ok(())
}

/// Wall-clock statistics of `f` after `warmup` unmeasured calls.
pub fn time_calls<F: FnMut() -> Result<()>>(warmup: usize, iterations: usize, mut f: F) -> Result<TimingStats> {
    check_timing_budget(warmup, iterations)?;
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(timing_stats(ms))
}

/// Median, interquartile range and mean of raw millisecond samples.
pub fn timing_stats(mut ms: Vec<f64>) -> TimingStats {
    assert!(!ms.is_empty(), "no timing samples");
    let mean_ms = ms.iter().sum::<f64>() / ms.len() as f64;
    ms.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (ms.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        ms[lo] + (ms[hi] - ms[lo]) * (pos - lo as f64)
    };
    TimingStats {
        median_ms: q(0.5),
        iqr_ms: q(0.75) - q(0.25),
        mean_ms,
        iterations: ms.len(),
    }
}

/// One row of measurements for a trained model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    pub log_average_miss_rate: Option<f64>,
    /// Mean test DICE between the thermal and visible masks, per loop.
    pub dice_per_loop: Vec<f64>,
    /// `(loop count, median ms)` of eval-mode inference.
    pub inference_ms: Vec<(usize, f64)>,
    /// Resolved configuration and seed, as `key = value` pairs.
    pub provenance: Vec<(String, String)>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// `key = value` lines, one table per list-valued field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        let _ = writeln!(s, "map = {}", opt(self.map));
        let _ = writeln!(s, "log_average_miss_rate = {}", opt(self.log_average_miss_rate));
        let _ = writeln!(s, "\n[ap]\nclass\tap");
        for (i, ap) in self.per_class_ap.iter().enumerate() {
            let name = self.class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let _ = writeln!(s, "{name}\t{}", opt(*ap));
        }
        let _ = writeln!(s, "\n[dice]\nloop\tdice");
        for (i, d) in self.dice_per_loop.iter().enumerate() {
            let _ = writeln!(s, "{}\t{d:.6}", i + 1);
        }
        if !self.inference_ms.is_empty() {
            let _ = writeln!(s, "\n[timing]\nloops\tmedian_ms");
            for (l, t) in &self.inference_ms {
                let _ = writeln!(s, "{l}\t{t:.4}");
            }
        }
        s
    }

    pub fn csv_header(max_loops: usize) -> String {
        let mut h = String::from("map,lamr");
        for i in 1..=max_loops {
            let _ = write!(h, ",dice_{i}");
        }
        h
    }

    /// `map,lamr,dice_1..dice_I`; absent values are empty fields.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut row = format!("{},{}", f(self.map), f(self.log_average_miss_rate));
        for d in &self.dice_per_loop {
            let _ = write!(row, ",{d:.6}");
        }
        row
    }
}

/// Binary PGM (P5) of a single-channel plane, values above 0.5 white.
pub fn write_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let shape = mask.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if shape.len() < 2 || mask.len() != h * w {
        return Err(Error::contract("write_pgm", format!("expected one plane, got {shape:?}")));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
