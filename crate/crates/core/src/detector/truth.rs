use std::fmt;
use std::str::FromStr;

use super::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which spectra an object shows up in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Visibility {
    Both,
    VisibleOnly,
    ThermalOnly,
}

impl fmt::Display for Visibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Visibility::Both => "both",
            Visibility::VisibleOnly => "visible_only",
            Visibility::ThermalOnly => "thermal_only",
        })
    }
}

impl FromStr for Visibility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "visible_only" => Ok(Self::VisibleOnly),
            "thermal_only" => Ok(Self::ThermalOnly),
            _ => Err(Error::Config(format!("unknown visibility tag {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    pub class_id: usize,
    pub visibility: Visibility,
}

/// Ground truth of one image: objects plus a full-resolution binary mask
/// `[1, 1, H, W]` that is the union of the box interiors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub objects: Vec<GtObject>,
    pub mask: Tensor<f32>,
}

impl GroundTruth {
    pub fn from_objects(objects: Vec<GtObject>, width: usize, height: usize) -> Self {
        let boxes: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
        Self {
            mask: rasterize_boxes(&boxes, width, height),
            objects,
        }
    }

    pub fn boxes_with_classes(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.class_id)).collect()
    }

    /// Mask at `1/factor` resolution: a cell is set when at least half of its
    /// `factor × factor` pixels are set.
    pub fn downsampled_mask(&self, factor: usize) -> Result<Tensor<f32>> {
        downsample_mask(&self.mask, factor)
    }
}

/// Binary `[1, 1, H, W]` mask of pixels whose centre lies in any box.
pub fn rasterize_boxes(boxes: &[BBox], width: usize, height: usize) -> Tensor<f32> {
    let mut m = Tensor::zeros(&[1, 1, height, width]);
    let data = m.data_mut();
    for b in boxes {
        let x0 = (b.x1 - 0.5).ceil().max(0.0) as usize;
        let y0 = (b.y1 - 0.5).ceil().max(0.0) as usize;
        for y in y0..height {
            if !(y as f64 + 0.5 < b.y2) {
                break;
            }
            for x in x0..width {
                if !(x as f64 + 0.5 < b.x2) {
                    break;
                }
                if b.covers_pixel(x, y) {
                    data[y * width + x] = 1.0;
                }
            }
        }
    }
    m
}

pub fn downsample_mask(mask: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = mask.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(
            "downsample_mask",
            format!("factor {factor} does not divide {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let need = factor * factor;
    for p in 0..n * c {
        let src = &mask.data()[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let mut count = 0;
                for dy in 0..factor {
                    let row = &src[(y * factor + dy) * w + x * factor..][..factor];
                    count += row.iter().filter(|&&v| v > 0.5).count();
                }
                if 2 * count >= need {
                    out.data_mut()[p * ho * wo + y * wo + x] = 1.0;
                }
            }
        }
    }
    Ok(out)
}
