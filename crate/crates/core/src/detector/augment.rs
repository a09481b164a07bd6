//! Paired augmentation. One geometric transform is shared by both spectra,
//! the boxes and the mask; photometric jitter is drawn per spectrum.

use rand::Rng;

use super::boxes::BBox;
use super::truth::{GroundTruth, GtObject};
use crate::synth::SpectralSample;
use crate::tensor::Tensor;

/// Boxes keeping less than this fraction of their area are dropped.
pub const MIN_KEPT_AREA: f64 = 0.25;
const CROP_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometric {
    Identity,
    HorizontalFlip,
    /// Resample the window `[x0, x0+w) × [y0, y0+h)` of the source to the
    /// full output size with nearest-neighbour lookup. Smaller than the image
    /// it is a crop (zoom in); larger, with a negative origin, a pad.
    Window { x0: f64, y0: f64, w: f64, h: f64 },
}

impl Geometric {
    /// Crop covering 50–100% of each side.
    pub fn random_crop<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Self {
        let (wf, hf) = (width as f64, height as f64);
        let s = rng.random_range(0.5..=1.0);
        let (w, h) = (wf * s, hf * s);
        Geometric::Window {
            x0: rng.random_range(0.0..=wf - w),
            y0: rng.random_range(0.0..=hf - h),
            w,
            h,
        }
    }

    /// Zoom out by up to 2×, placing the image anywhere on the larger canvas.
    pub fn random_pad<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Self {
        let (wf, hf) = (width as f64, height as f64);
        let s = rng.random_range(1.0..=2.0);
        let (w, h) = (wf * s, hf * s);
        Geometric::Window {
            x0: -rng.random_range(0.0..=w - wf),
            y0: -rng.random_range(0.0..=h - hf),
            w,
            h,
        }
    }

    /// Source pixel for output pixel `(x, y)`, or `None` outside the source.
    pub fn source_pixel(&self, x: usize, y: usize, width: usize, height: usize) -> Option<(usize, usize)> {
        match *self {
            Geometric::Identity => Some((x, y)),
            Geometric::HorizontalFlip => Some((width - 1 - x, y)),
            Geometric::Window { x0, y0, w, h } => {
                let sx = (x0 + (x as f64 + 0.5) * w / width as f64).floor();
                let sy = (y0 + (y as f64 + 0.5) * h / height as f64).floor();
                if sx < 0.0 || sy < 0.0 || sx >= width as f64 || sy >= height as f64 {
                    None
                } else {
                    Some((sx as usize, sy as usize))
                }
            }
        }
    }

    pub fn map_box(&self, b: &BBox, width: usize, height: usize) -> BBox {
        let (wf, hf) = (width as f64, height as f64);
        match *self {
            Geometric::Identity => *b,
            Geometric::HorizontalFlip => BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2),
            Geometric::Window { x0, y0, w, h } => BBox::new(
                (b.x1 - x0) * wf / w,
                (b.y1 - y0) * hf / h,
                (b.x2 - x0) * wf / w,
                (b.y2 - y0) * hf / h,
            ),
        }
    }

    fn apply_image(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let [n, c, h, w] = img.dims4().expect("image tensor");
        let mut out = img.clone();
        for b in 0..n {
            for ch in 0..c {
                let plane = &img.data()[(b * c + ch) * h * w..][..h * w];
                let fill = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / plane.len() as f64;
                let dst = &mut out.data_mut()[(b * c + ch) * h * w..][..h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = match self.source_pixel(x, y, w, h) {
                            Some((sx, sy)) => plane[sy * w + sx],
                            None => fill as f32,
                        };
                    }
                }
            }
        }
        out
    }
}

/// Apply `t` to both images and the boxes. Boxes are clipped and dropped
/// below [`MIN_KEPT_AREA`]; the mask is rebuilt from the surviving boxes.
pub fn apply_geometric(sample: &SpectralSample, t: &Geometric) -> SpectralSample {
    let [_, _, h, w] = sample.visible.dims4().expect("image tensor");
    let objects: Vec<GtObject> = sample
        .gt
        .objects
        .iter()
        .filter_map(|o| {
            let moved = t.map_box(&o.bbox, w, h);
            let clipped = moved.clip(w as f64, h as f64);
            (clipped.is_valid() && clipped.area() >= MIN_KEPT_AREA * moved.area()).then_some(GtObject {
                bbox: clipped,
                ..*o
            })
        })
        .collect();
    SpectralSample {
        visible: t.apply_image(&sample.visible),
        thermal: t.apply_image(&sample.thermal),
        gt: GroundTruth::from_objects(objects, w, h),
        meta: sample.meta.clone(),
    }
}

/// Random brightness and contrast, clamped to `[0, 1]`.
pub fn photometric<R: Rng + ?Sized>(img: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
    let contrast = if rng.random_bool(0.5) { rng.random_range(0.8..1.2) } else { 1.0 };
    let brightness = if rng.random_bool(0.5) { rng.random_range(-0.1..0.1) } else { 0.0 };
    img.map(|v| ((f64::from(v) - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0) as f32)
}

/// One of identity / crop / pad / flip with equal odds, then independent
/// photometric jitter per spectrum. A crop that loses every object is
/// redrawn up to ten times, after which the sample is left uncropped.
pub fn augment_pair<R: Rng + ?Sized>(sample: &SpectralSample, rng: &mut R) -> SpectralSample {
    let [_, _, h, w] = sample.visible.dims4().expect("image tensor");
    let mut out = match rng.random_range(0..4) {
        0 => sample.clone(),
        1 => {
            let mut chosen = None;
            for _ in 0..CROP_RETRIES {
                let t = Geometric::random_crop(rng, w, h);
                let s = apply_geometric(sample, &t);
                if !s.gt.objects.is_empty() || sample.gt.objects.is_empty() {
                    chosen = Some(s);
                    break;
                }
            }
            chosen.unwrap_or_else(|| sample.clone())
        }
        2 => apply_geometric(sample, &Geometric::random_pad(rng, w, h)),
        _ => apply_geometric(sample, &Geometric::HorizontalFlip),
    };
    out.visible = photometric(&out.visible, rng);
    out.thermal = photometric(&out.thermal, rng);
    out
}
