use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::anchors::{generate_anchors, AnchorBox};
use crate::cfr::{baseline_fuse, final_fusion, BaselineStrategy, CfrBlock, CfrConfig, CfrTrace, ConcatConvParams};
use crate::error::{Error, Result};
use crate::tensor::{BnConfig, BnStats, Init, Mode, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spectrum {
    Visible,
    Thermal,
}

/// What happens at the fusion point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Cfr { loops: usize },
    Baseline(BaselineStrategy),
    /// Only one backbone is built; its features go straight to the trunk.
    SingleStream(Spectrum),
}

impl FusionMode {
    /// Loop count 0 is the average-fusion control.
    pub fn from_loops(loops: usize) -> Self {
        if loops == 0 {
            FusionMode::Baseline(BaselineStrategy::Average)
        } else {
            FusionMode::Cfr { loops }
        }
    }

    pub fn loops(&self) -> usize {
        match self {
            FusionMode::Cfr { loops } => *loops,
            _ => 0,
        }
    }

    fn uses(&self, s: Spectrum) -> bool {
        match self {
            FusionMode::SingleStream(only) => *only == s,
            _ => true,
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Cfr { loops } => write!(f, "cfr:{loops}"),
            FusionMode::Baseline(s) => write!(f, "baseline:{}", s.name()),
            FusionMode::SingleStream(Spectrum::Visible) => f.write_str("visible_only"),
            FusionMode::SingleStream(Spectrum::Thermal) => f.write_str("thermal_only"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(n) = s.strip_prefix("cfr:") {
            let loops = n
                .parse()
                .map_err(|_| Error::Config(format!("bad loop count in {s:?}")))?;
            return Ok(FusionMode::Cfr { loops });
        }
        if let Some(b) = s.strip_prefix("baseline:") {
            return Ok(FusionMode::Baseline(b.parse()?));
        }
        match s {
            "visible_only" => Ok(FusionMode::SingleStream(Spectrum::Visible)),
            "thermal_only" => Ok(FusionMode::SingleStream(Spectrum::Thermal)),
            _ => Err(Error::Config(format!(
                "unknown fusion {s:?} (expected cfr:N, baseline:NAME, visible_only or thermal_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output width of each stem convolution. The last entry is the width at
    /// the fusion point.
    pub channels: Vec<usize>,
    /// Downsampling from input to the fusion point; a power of two. The first
    /// `log2(downsample)` stem convolutions have stride 2.
    pub downsample: usize,
    /// Strides of the detection layers relative to the input.
    pub det_strides: Vec<usize>,
    pub trunk_channels: usize,
}

impl BackboneConfig {
    pub fn fusion_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    fn stem_strides(&self) -> Result<Vec<usize>> {
        let d = self.downsample;
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::Config(format!("downsample {d} is not a power of two")));
        }
        let halvings = d.trailing_zeros() as usize;
        if self.channels.is_empty() || halvings > self.channels.len() {
            return Err(Error::Config(format!(
                "{} stem layers cannot downsample by {d}",
                self.channels.len()
            )));
        }
        Ok((0..self.channels.len()).map(|i| if i < halvings { 2 } else { 1 }).collect())
    }

    fn trunk_strides(&self) -> Result<Vec<usize>> {
        let mut prev = self.downsample;
        let mut out = Vec::new();
        for &s in &self.det_strides {
            if s != prev && s != 2 * prev {
                return Err(Error::Config(format!(
                    "detection stride {s} must equal or double the previous stride {prev}"
                )));
            }
            out.push(s / prev);
            prev = s;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Object classes, excluding background.
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// Ascending anchor scales for each detection layer.
    pub anchor_scales: Vec<Vec<f64>>,
    pub anchor_ratios: Vec<f64>,
    pub fusion: FusionMode,
    pub shared_bn_stats: bool,
    pub bn: BnConfig,
}

/// Width/height ratio of the pedestrian anchors.
pub const PEDESTRIAN_RATIO: f64 = 0.41;

fn scale_pairs(bases: &[f64]) -> Vec<Vec<f64>> {
    bases.iter().map(|&s| vec![s, s * 2f64.sqrt()]).collect()
}

impl DetectorConfig {
    /// 96×96 single-class preset.
    pub fn pedestrian(fusion: FusionMode) -> Self {
        Self {
            image_width: 96,
            image_height: 96,
            num_classes: 1,
            backbone: BackboneConfig {
                channels: vec![12, 16, 16],
                downsample: 4,
                det_strides: vec![8, 16, 32],
                trunk_channels: 32,
            },
            anchor_scales: scale_pairs(&[8.0, 16.0, 32.0]),
            anchor_ratios: vec![PEDESTRIAN_RATIO],
            fusion,
            shared_bn_stats: true,
            bn: BnConfig::default(),
        }
    }

    /// 96×96 preset for the bicycle/car/person setting with square, wide and
    /// tall anchors.
    pub fn multiclass(fusion: FusionMode) -> Self {
        Self {
            num_classes: 3,
            anchor_ratios: vec![1.0, 2.0, 0.5],
            ..Self::pedestrian(fusion)
        }
    }

    /// 640×512 pedestrian preset with anchor scales 32 to 128√2.
    pub fn pedestrian_full_resolution(fusion: FusionMode) -> Self {
        Self {
            image_width: 640,
            image_height: 512,
            backbone: BackboneConfig {
                channels: vec![16, 32, 64, 64],
                downsample: 8,
                det_strides: vec![16, 32, 64],
                trunk_channels: 64,
            },
            anchor_scales: scale_pairs(&[32.0, 64.0, 128.0]),
            ..Self::pedestrian(fusion)
        }
    }

    /// 16×16 input, fusion width 2. Small enough for finite differences.
    pub fn tiny(fusion: FusionMode) -> Self {
        Self {
            image_width: 16,
            image_height: 16,
            num_classes: 1,
            backbone: BackboneConfig {
                channels: vec![2, 2],
                downsample: 2,
                det_strides: vec![2, 4, 8],
                trunk_channels: 2,
            },
            anchor_scales: vec![vec![4.0], vec![8.0], vec![16.0]],
            anchor_ratios: vec![PEDESTRIAN_RATIO],
            fusion,
            shared_bn_stats: true,
            bn: BnConfig::default(),
        }
    }

    pub fn anchors_per_cell(&self, layer: usize) -> usize {
        self.anchor_scales[layer].len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.stem_strides()?;
        self.backbone.trunk_strides()?;
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one object class".into()));
        }
        if self.backbone.channels.contains(&0) || self.backbone.trunk_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.anchor_scales.len() != self.backbone.det_strides.len() {
            return Err(Error::Config("need one anchor scale list per detection layer".into()));
        }
        if let FusionMode::Cfr { loops } = self.fusion {
            CfrConfig::new(self.backbone.fusion_channels(), loops).validate()?;
            if loops == 0 {
                return Err(Error::Config("cfr fusion needs at least one loop".into()));
            }
        }
        Ok(())
    }
}

/// Convolution (no bias), batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T: Scalar> {
    pub name: String,
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
    pub stats: BnStats<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                &[cout, cin, 3, 3],
                Init::HeNormal { fan_in: cin * 9 },
                rng,
            )?,
            gamma: ps.add(format!("{name}.bn.gamma"), &[cout], Init::Constant(1.0), rng)?,
            beta: ps.add(format!("{name}.bn.beta"), &[cout], Init::Constant(0.0), rng)?,
            stride,
            stats: BnStats::new(cout),
            name: name.to_string(),
        })
    }

    fn forward(&mut self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: Var, bn: BnConfig, mode: Mode) -> Result<Var> {
        let w = ps.bind(tape, self.weight);
        let g = ps.bind(tape, self.gamma);
        let b = ps.bind(tape, self.beta);
        let y = tape.conv2d(x, w, None, self.stride, 1)?;
        let y = tape.batch_norm(y, g, b, &mut self.stats, bn, mode)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadParams {
    cls_weight: ParamId,
    cls_bias: ParamId,
    reg_weight: ParamId,
    reg_bias: ParamId,
}

/// Outputs of one forward pass. `cls` is `[N, anchors, classes + 1]` with
/// background in column 0; `reg` is `[N, anchors, 4]`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub cls: Var,
    pub reg: Var,
    pub fused: Var,
    pub trace: Option<CfrTrace>,
}

/// Network structure and buffers. Parameters live in a separate
/// [`ParamSet`] so the same structure can run against perturbed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    pub config: DetectorConfig,
    pub stem_t: Vec<ConvBn<T>>,
    pub stem_v: Vec<ConvBn<T>>,
    pub cfr: Option<CfrBlock<T>>,
    pub concat: Option<ConcatConvParams>,
    pub trunk: Vec<ConvBn<T>>,
    heads: Vec<HeadParams>,
    pub anchors: Vec<AnchorBox>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, ps: &mut ParamSet<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let stem = |ps: &mut ParamSet<T>, rng: &mut R, prefix: &str, cin: usize| -> Result<Vec<ConvBn<T>>> {
            let mut layers = Vec::new();
            let mut c = cin;
            for (i, (&cout, stride)) in bb.channels.iter().zip(bb.stem_strides()?).enumerate() {
                layers.push(ConvBn::new(ps, &format!("{prefix}.conv{i}"), c, cout, stride, rng)?);
                c = cout;
            }
            Ok(layers)
        };
        let stem_t = if config.fusion.uses(Spectrum::Thermal) {
            stem(ps, rng, "backbone_t", 1)?
        } else {
            Vec::new()
        };
        let stem_v = if config.fusion.uses(Spectrum::Visible) {
            stem(ps, rng, "backbone_v", 3)?
        } else {
            Vec::new()
        };
        let c = bb.fusion_channels();
        let (cfr, concat) = match config.fusion {
            FusionMode::Cfr { loops } => {
                let cfg = CfrConfig {
                    bn: config.bn,
                    shared_bn_stats: config.shared_bn_stats,
                    ..CfrConfig::new(c, loops)
                };
                (Some(CfrBlock::new(ps, cfg, rng)?), None)
            }
            FusionMode::Baseline(BaselineStrategy::ConcatConv) => (None, Some(ConcatConvParams::new(ps, c, rng)?)),
            _ => (None, None),
        };
        let mut trunk = Vec::new();
        let mut heads = Vec::new();
        let mut cin = c;
        let tc = bb.trunk_channels;
        let k1 = config.num_classes + 1;
        for (layer, stride) in bb.trunk_strides()?.into_iter().enumerate() {
            trunk.push(ConvBn::new(ps, &format!("head.trunk{layer}"), cin, tc, stride, rng)?);
            cin = tc;
            let a = config.anchors_per_cell(layer);
            heads.push(HeadParams {
                cls_weight: ps.add(
                    format!("head.cls{layer}.weight"),
                    &[a * k1, tc, 3, 3],
                    Init::HeNormal { fan_in: tc * 9 },
                    rng,
                )?,
                cls_bias: ps.add(format!("head.cls{layer}.bias"), &[a * k1], Init::Constant(0.0), rng)?,
                reg_weight: ps.add(
                    format!("head.reg{layer}.weight"),
                    &[a * 4, tc, 3, 3],
                    Init::HeNormal { fan_in: tc * 9 },
                    rng,
                )?,
                reg_bias: ps.add(format!("head.reg{layer}.bias"), &[a * 4], Init::Constant(0.0), rng)?,
            });
        }
        let anchors = generate_anchors(
            config.image_width,
            config.image_height,
            &bb.det_strides,
            &config.anchor_scales,
            &config.anchor_ratios,
        )?;
        Ok(Self {
            config,
            stem_t,
            stem_v,
            cfr,
            concat,
            trunk,
            heads,
            anchors,
        })
    }

    /// Side length ratio between the input and the mask logits.
    pub fn mask_factor(&self) -> usize {
        self.config.backbone.downsample
    }

    fn run_stem(
        layers: &mut [ConvBn<T>],
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: Var,
        bn: BnConfig,
        mode: Mode,
    ) -> Result<Var> {
        layers.iter_mut().try_fold(x, |h, l| l.forward(tape, ps, h, bn, mode))
    }

    /// Both streams to the fusion point, fusion, trunk and heads.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        visible: Var,
        thermal: Var,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let [n, cv, h, w] = tape.value(visible).dims4()?;
        let [nt, ct, ht, wt] = tape.value(thermal).dims4()?;
        let cfg = &self.config;
        if (cv, ct) != (3, 1) || (nt, ht, wt) != (n, h, w) || (h, w) != (cfg.image_height, cfg.image_width) {
            return Err(Error::contract(
                "detector_forward",
                format!(
                    "expected visible [N,3,{},{}] and matching thermal [N,1,..]",
                    cfg.image_height, cfg.image_width
                ),
            ));
        }
        let bn = cfg.bn;
        let f_t = (!self.stem_t.is_empty())
            .then(|| Self::run_stem(&mut self.stem_t, tape, ps, thermal, bn, mode))
            .transpose()?;
        let f_v = (!self.stem_v.is_empty())
            .then(|| Self::run_stem(&mut self.stem_v, tape, ps, visible, bn, mode))
            .transpose()?;
        let (fused, trace) = match (self.config.fusion, f_t, f_v) {
            (FusionMode::Cfr { .. }, Some(t), Some(v)) => {
                let block = self.cfr.as_mut().expect("cfr block built");
                let trace = block.run_cycle(tape, ps, t, v, mode)?;
                (final_fusion(tape, &trace)?, Some(trace))
            }
            (FusionMode::Baseline(s), Some(t), Some(v)) => (baseline_fuse(tape, ps, t, v, s, self.concat.as_ref())?, None),
            (FusionMode::SingleStream(Spectrum::Thermal), Some(t), _) => (t, None),
            (FusionMode::SingleStream(Spectrum::Visible), _, Some(v)) => (v, None),
            _ => unreachable!("streams are built to match the fusion mode"),
        };
        let k1 = self.config.num_classes + 1;
        let mut x = fused;
        let mut cls_rows = Vec::new();
        let mut reg_rows = Vec::new();
        for (layer, head) in self.trunk.iter_mut().zip(&self.heads) {
            x = layer.forward(tape, ps, x, bn, mode)?;
            let cw = ps.bind(tape, head.cls_weight);
            let cb = ps.bind(tape, head.cls_bias);
            let rw = ps.bind(tape, head.reg_weight);
            let rb = ps.bind(tape, head.reg_bias);
            let c = tape.conv2d(x, cw, Some(cb), 1, 1)?;
            let r = tape.conv2d(x, rw, Some(rb), 1, 1)?;
            cls_rows.push(tape.anchor_rows(c, k1)?);
            reg_rows.push(tape.anchor_rows(r, 4)?);
        }
        let cls = tape.concat(&cls_rows, 1)?;
        let reg = tape.concat(&reg_rows, 1)?;
        Ok(ForwardOutput { cls, reg, fused, trace })
    }

    fn conv_bn_layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        self.stem_t.iter().chain(&self.stem_v).chain(&self.trunk)
    }

    /// Batch-norm running statistics as named tensors.
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for l in self.conv_bn_layers() {
            let c = l.stats.running_mean.len();
            out.push((
                format!("{}.bn.running_mean", l.name),
                Tensor::from_vec(&[c], l.stats.running_mean.clone()).expect("shape"),
            ));
            out.push((
                format!("{}.bn.running_var", l.name),
                Tensor::from_vec(&[c], l.stats.running_var.clone()).expect("shape"),
            ));
        }
        if let Some(cfr) = &self.cfr {
            out.extend(cfr.params.buffers());
        }
        out
    }

    pub fn load_buffers(&mut self, lookup: &dyn Fn(&str) -> Option<Vec<T>>) -> Result<()> {
        for l in self
            .stem_t
            .iter_mut()
            .chain(self.stem_v.iter_mut())
            .chain(self.trunk.iter_mut())
        {
            for (suffix, dst) in [
                ("running_mean", &mut l.stats.running_mean),
                ("running_var", &mut l.stats.running_var),
            ] {
                let name = format!("{}.bn.{suffix}", l.name);
                let v = lookup(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
                if v.len() != dst.len() {
                    return Err(Error::Config(format!("{name} has wrong length")));
                }
                *dst = v;
            }
        }
        if let Some(cfr) = &mut self.cfr {
            cfr.params.load_buffers(lookup)?;
        }
        Ok(())
    }
}
