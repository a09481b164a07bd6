//! Procedural visible/thermal scene pairs with controlled complementarity.
//!
//! Objects are drawn once in scene coordinates and rendered into each
//! spectrum according to a visibility tag, so both images are aligned by
//! construction. Visible rendering is a striped colour offset against the
//! background; thermal rendering is a warm blob. An object absent from a
//! spectrum is simply not drawn there.

mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::{BBox, GroundTruth, GtObject, Visibility};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{
    generate_dataset, load_split, read_manifest, sample_seed, DatasetManifest, ExternalPaths, ExternalSource,
    ManifestRow, Split,
};

/// Visible contrast multiplier for night scenes.
pub const NIGHT_CONTRAST: f64 = 0.25;

const PLACEMENT_ATTEMPTS: usize = 100;
const MAX_CLUTTER_SHAPES: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeOfDay {
    Day,
    Night,
    /// Each scene is a night scene with this probability.
    Mixed(f64),
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeOfDay::Day => f.write_str("day"),
            TimeOfDay::Night => f.write_str("night"),
            TimeOfDay::Mixed(p) => write!(f, "mixed:{p}"),
        }
    }
}

impl FromStr for TimeOfDay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(TimeOfDay::Day),
            "night" => Ok(TimeOfDay::Night),
            _ => {
                let p = s
                    .strip_prefix("mixed:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| Error::Config(format!("bad time_of_day {s:?} (day, night or mixed:P)")))?;
                Ok(TimeOfDay::Mixed(p))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectClass {
    pub name: String,
    /// Width over height, sampled uniformly in this range.
    pub aspect: (f64, f64),
    pub shape: Shape,
}

impl ObjectClass {
    fn new(name: &str, aspect: (f64, f64), shape: Shape) -> Self {
        Self {
            name: name.to_string(),
            aspect,
            shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object box height range in pixels.
    pub min_object_height: f64,
    pub max_object_height: f64,
    pub p_both: f64,
    pub p_visible_only: f64,
    pub p_thermal_only: f64,
    /// 0 is a plain background; 1 scatters the maximum number of distractors.
    pub clutter: f64,
    pub noise_sigma: f64,
    pub time_of_day: TimeOfDay,
    pub classes: Vec<ObjectClass>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::pedestrian()
    }
}

impl SceneSpec {
    /// 96×96 pedestrian scenes; heights fit the detector's anchor range.
    pub fn pedestrian() -> Self {
        Self {
            width: 96,
            height: 96,
            min_objects: 1,
            max_objects: 4,
            min_object_height: 14.0,
            max_object_height: 48.0,
            p_both: 0.5,
            p_visible_only: 0.25,
            p_thermal_only: 0.25,
            clutter: 0.5,
            noise_sigma: 0.03,
            time_of_day: TimeOfDay::Day,
            classes: vec![ObjectClass::new("person", (0.35, 0.5), Shape::Rect)],
        }
    }

    /// Bicycles, cars and people.
    pub fn multiclass() -> Self {
        Self {
            min_object_height: 12.0,
            max_object_height: 40.0,
            classes: vec![
                ObjectClass::new("bicycle", (1.2, 1.6), Shape::Ellipse),
                ObjectClass::new("car", (1.6, 2.2), Shape::Rect),
                ObjectClass::new("person", (0.35, 0.5), Shape::Rect),
            ],
            ..Self::pedestrian()
        }
    }

    /// Same scenes with every object tagged `visibility`.
    pub fn with_only(mut self, visibility: Visibility) -> Self {
        (self.p_both, self.p_visible_only, self.p_thermal_only) = match visibility {
            Visibility::Both => (1.0, 0.0, 0.0),
            Visibility::VisibleOnly => (0.0, 1.0, 0.0),
            Visibility::ThermalOnly => (0.0, 0.0, 1.0),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_both, self.p_visible_only, self.p_thermal_only];
        if ps.iter().any(|p| !(*p >= 0.0)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "visibility probabilities must be nonnegative and sum to 1, got {ps:?}"
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config("scene must be at least 8x8".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(self.min_object_height >= 4.0)
            || self.min_object_height > self.max_object_height
            || self.max_object_height > self.height as f64
        {
            return Err(Error::Config(format!(
                "object heights [{}, {}] must lie in [4, {}]",
                self.min_object_height, self.max_object_height, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("clutter must be in [0, 1] and noise_sigma >= 0".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("need at least one object class".into()));
        }
        for c in &self.classes {
            if !(c.aspect.0 > 0.0) || c.aspect.0 > c.aspect.1 {
                return Err(Error::Config(format!("bad aspect range for {}", c.name)));
            }
        }
        Ok(())
    }
}

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub id: String,
    pub seed: u64,
    pub night: bool,
    pub requested_objects: usize,
    /// Lower than requested when placement ran out of room.
    pub placed_objects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub visible: Tensor<f32>,
    /// `[1, 1, H, W]` in `[0, 1]`.
    pub thermal: Tensor<f32>,
    pub gt: GroundTruth,
    pub meta: SampleMeta,
}

struct Canvas {
    w: usize,
    h: usize,
    /// Channel-major planes.
    planes: Vec<Vec<f64>>,
}

impl Canvas {
    fn new(w: usize, h: usize, channels: usize) -> Self {
        Self {
            w,
            h,
            planes: vec![vec![0.0; w * h]; channels],
        }
    }

    /// Pixels of `shape` inside `b`, with a normalised radius in `[0, 1]`.
    fn region(&self, b: &BBox, shape: Shape) -> Vec<(usize, f64)> {
        let (cx, cy) = b.center();
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let mut out = Vec::new();
        let x0 = b.x1.max(0.0).floor() as usize;
        let y0 = b.y1.max(0.0).floor() as usize;
        for y in y0..self.h.min(b.y2.ceil() as usize) {
            for x in x0..self.w.min(b.x2.ceil() as usize) {
                if !b.covers_pixel(x, y) {
                    continue;
                }
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let r2 = dx * dx + dy * dy;
                let r = match shape {
                    Shape::Ellipse if r2 > 1.0 => continue,
                    Shape::Ellipse => r2.sqrt(),
                    Shape::Rect => dx.abs().max(dy.abs()),
                };
                out.push((y * self.w + x, r.min(1.0)));
            }
        }
        out
    }

    fn into_tensor(self) -> Tensor<f32> {
        let c = self.planes.len();
        let data = self
            .planes
            .into_iter()
            .flatten()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect();
        Tensor::from_vec(&[1, c, self.h, self.w], data).expect("canvas shape")
    }
}

fn sample_visibility<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Visibility {
    let u: f64 = rng.random();
    if u < spec.p_both {
        Visibility::Both
    } else if u < spec.p_both + spec.p_visible_only {
        Visibility::VisibleOnly
    } else if spec.p_thermal_only > 0.0 {
        Visibility::ThermalOnly
    } else if spec.p_visible_only > 0.0 {
        Visibility::VisibleOnly
    } else {
        Visibility::Both
    }
}

fn place_objects<R: Rng>(spec: &SceneSpec, count: usize, rng: &mut R) -> Vec<GtObject> {
    let mut objects: Vec<GtObject> = Vec::new();
    'outer: for _ in 0..count {
        let class_id = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        for _ in 0..PLACEMENT_ATTEMPTS {
            let h = rng.random_range(spec.min_object_height..=spec.max_object_height).round();
            let aspect = rng.random_range(class.aspect.0..=class.aspect.1);
            let w = (h * aspect).round().clamp(2.0, spec.width as f64);
            let x1 = rng.random_range(0..=spec.width - w as usize) as f64;
            let y1 = rng.random_range(0..=spec.height - h as usize) as f64;
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
            if objects.iter().all(|o| o.bbox.intersection(&bbox) == 0.0) {
                let visibility = sample_visibility(spec, rng);
                objects.push(GtObject {
                    bbox,
                    class_id,
                    visibility,
                });
                continue 'outer;
            }
        }
        break;
    }
    objects
}

/// Render one scene. Pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SpectralSample> {
    generate_scene_with_id(spec, seed, format!("scene-{seed:016x}"))
}

pub(crate) fn generate_scene_with_id(spec: &SceneSpec, seed: u64, id: String) -> Result<SpectralSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let night = match spec.time_of_day {
        TimeOfDay::Day => false,
        TimeOfDay::Night => true,
        TimeOfDay::Mixed(p) => rng.random_bool(p),
    };
    let contrast_scale = if night { NIGHT_CONTRAST } else { 1.0 };

    // backgrounds: flat base plus a gentle vertical gradient
    let mut vis = Canvas::new(w, h, 3);
    let mut base_v = [0.0; 3];
    for (c, plane) in vis.planes.iter_mut().enumerate() {
        base_v[c] = rng.random_range(0.3..0.7);
        let g = rng.random_range(-0.05..0.05);
        for (i, px) in plane.iter_mut().enumerate() {
            *px = base_v[c] + g * ((i / w) as f64 / h as f64 - 0.5);
        }
    }
    let mut thm = Canvas::new(w, h, 1);
    let base_t = rng.random_range(0.15..0.35);
    let gt_ = rng.random_range(-0.05..0.05);
    for (i, px) in thm.planes[0].iter_mut().enumerate() {
        *px = base_t + gt_ * ((i / w) as f64 / h as f64 - 0.5);
    }
    let bg_v = vis.planes.clone();
    let bg_t = thm.planes[0].clone();

    // distractors: rectangles in the visible image, roundish warm spots in thermal
    let shapes = (spec.clutter * MAX_CLUTTER_SHAPES).round() as usize;
    for _ in 0..shapes {
        let bw = rng.random_range(4.0..30.0);
        let bh = rng.random_range(4.0..30.0);
        let x = rng.random_range(0.0..w as f64);
        let y = rng.random_range(0.0..h as f64);
        let b = BBox::from_center(x, y, bw, bh);
        let offs: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3) * contrast_scale).collect();
        for (idx, _) in vis.region(&b, Shape::Rect) {
            for (plane, o) in vis.planes.iter_mut().zip(&offs) {
                plane[idx] += o;
            }
        }
    }
    for _ in 0..shapes {
        let d = rng.random_range(4.0..24.0);
        let aspect = rng.random_range(0.8..1.25);
        let x = rng.random_range(0.0..w as f64);
        let y = rng.random_range(0.0..h as f64);
        let amp = rng.random_range(0.1..0.35);
        let b = BBox::from_center(x, y, d * aspect, d);
        for (idx, _) in thm.region(&b, Shape::Ellipse) {
            thm.planes[0][idx] += amp;
        }
    }

    let requested = rng.random_range(spec.min_objects..=spec.max_objects);
    let objects = place_objects(spec, requested, &mut rng);
    for o in &objects {
        let shape = spec.classes[o.class_id].shape;
        let region = vis.region(&o.bbox, shape);
        // visible: one dominant channel at full contrast, the others partial,
        // each pushed away from the nearer end of [0, 1]
        let a = rng.random_range(0.3..0.55) * contrast_scale;
        let dominant = rng.random_range(0..3);
        let offs: Vec<f64> = (0..3)
            .map(|c| {
                let mag = if c == dominant { a } else { a * rng.random_range(0.0..1.0) };
                if base_v[c] < 0.5 {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let b = rng.random_range(0.35..0.55);
        let y1 = o.bbox.y1 as usize;
        if o.visibility != Visibility::ThermalOnly {
            for &(idx, _) in &region {
                let stripe = if ((idx / w - y1) / 2).is_multiple_of(2) { 1.25 } else { 0.75 };
                for c in 0..3 {
                    vis.planes[c][idx] = bg_v[c][idx] + offs[c] * stripe;
                }
            }
        }
        if o.visibility != Visibility::VisibleOnly {
            for &(idx, r) in &region {
                thm.planes[0][idx] = bg_t[idx] + b * (1.0 - 0.3 * r * r);
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for plane in vis.planes.iter_mut().chain(thm.planes.iter_mut()) {
            for px in plane.iter_mut() {
                *px += noise.sample(&mut rng);
            }
        }
    }

    let placed = objects.len();
    Ok(SpectralSample {
        visible: vis.into_tensor(),
        thermal: thm.into_tensor(),
        gt: GroundTruth::from_objects(objects, w, h),
        meta: SampleMeta {
            id,
            seed,
            night,
            requested_objects: requested,
            placed_objects: placed,
        },
    })
}
