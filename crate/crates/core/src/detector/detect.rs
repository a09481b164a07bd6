use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::AnchorBox;
use super::boxes::{decode, nms};
use super::loss::{joint_loss, LossConfig};
use super::model::{DetectorConfig, ForwardOutput, Network};
use super::truth::GroundTruth;
use super::Detection;
use crate::error::{Error, Result};
use crate::synth::SpectralSample;
use crate::tensor::io::{load_checkpoint, save_checkpoint};
use crate::tensor::{Mode, ParamSet, Scalar, Sgd, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub nms_iou: f64,
    /// Candidates need a class probability strictly above this.
    pub conf_threshold: f64,
    /// Detections kept per image after NMS.
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.45,
            conf_threshold: 0.05,
            top_k: 100,
        }
    }
}

/// Stacked inputs and truths of several samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub visible: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub truths: Vec<GroundTruth>,
}

impl Batch {
    pub fn from_samples(samples: &[&SpectralSample]) -> Result<Self> {
        let vis: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.visible).collect();
        let thm: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.thermal).collect();
        Ok(Self {
            visible: Tensor::stack_batch(&vis)?,
            thermal: Tensor::stack_batch(&thm)?,
            truths: samples.iter().map(|s| s.gt.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }
}

/// Per-image detections from classifier rows `[N, A, K+1]` and offsets
/// `[N, A, 4]`: softmax, threshold, decode, clip, per-class NMS, top-k.
pub fn decode_detections(
    cls: &[f64],
    reg: &[f64],
    anchors: &[AnchorBox],
    k1: usize,
    image_size: (usize, usize),
    cfg: &DetectConfig,
) -> Vec<Vec<Detection>> {
    let a = anchors.len();
    let n = cls.len() / (a * k1);
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        // (box, prob, anchor index) per class
        let mut per_class: Vec<Vec<(super::BBox, f64, usize)>> = vec![Vec::new(); k1 - 1];
        for (i, anchor) in anchors.iter().enumerate() {
            let row = &cls[(b * a + i) * k1..(b * a + i + 1) * k1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let off = &reg[(b * a + i) * 4..(b * a + i + 1) * 4];
            let mut boxed = None;
            for c in 1..k1 {
                let p = exps[c] / z;
                if p > cfg.conf_threshold {
                    let bb = *boxed.get_or_insert_with(|| {
                        decode(&[off[0], off[1], off[2], off[3]], &anchor.bbox()).clip(w, h)
                    });
                    if bb.is_valid() {
                        per_class[c - 1].push((bb, p, i));
                    }
                }
            }
        }
        let mut dets: Vec<(Detection, usize)> = Vec::new();
        for (c, cands) in per_class.iter().enumerate() {
            for k in nms(cands, cfg.nms_iou) {
                let (bbox, p, i) = cands[k];
                dets.push((
                    Detection {
                        bbox,
                        class_id: c,
                        confidence: p.clamp(0.0, 1.0),
                    },
                    i,
                ));
            }
        }
        dets.sort_by(|x, y| {
            y.0.confidence
                .partial_cmp(&x.0.confidence)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.0.class_id.cmp(&y.0.class_id))
        });
        dets.truncate(cfg.top_k);
        out.push(dets.into_iter().map(|d| d.0).collect());
    }
    out
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
    pub segmentation: f64,
}

impl StepStats {
    pub fn detection(&self) -> f64 {
        self.classification + self.regression
    }
}

/// Eval-mode predictions for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub detections: Vec<Vec<Detection>>,
    /// Mask logits per loop, `[N, 1, h, w]`; empty without a cycle.
    pub mask_logits_t: Vec<Tensor<f32>>,
    pub mask_logits_v: Vec<Tensor<f32>>,
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector<T: Scalar = f32> {
    pub net: Network<T>,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = Network::new(config, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.net.config
    }

    fn run(&mut self, tape: &mut Tape<T>, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        let v = tape.leaf(batch.visible.cast(), false);
        let t = tape.leaf(batch.thermal.cast(), false);
        self.net.forward(tape, &self.params, v, t, mode)
    }

    /// Forward in train mode, backward, and one SGD update.
    pub fn train_step(&mut self, batch: &Batch, loss_cfg: &LossConfig, opt: &mut Sgd<T>) -> Result<StepStats> {
        let mut tape = Tape::new();
        let out = self.run(&mut tape, batch, Mode::Train)?;
        let factor = self.net.mask_factor();
        let terms = joint_loss(&mut tape, &out, &self.net.anchors, &batch.truths, factor, loss_cfg)?;
        let total = tape.value(terms.total).data()[0].as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "joint loss (classification {}, regression {}, segmentation {})",
                terms.classification, terms.regression, terms.segmentation
            )));
        }
        let grads = tape.backward(terms.total)?;
        self.params.zero_grad();
        self.params.accumulate(&tape, &grads);
        opt.step(&mut self.params);
        Ok(StepStats {
            total,
            classification: terms.classification,
            regression: terms.regression,
            segmentation: terms.segmentation,
        })
    }

    /// Joint loss in eval mode, without updating anything.
    pub fn eval_loss(&mut self, batch: &Batch, loss_cfg: &LossConfig) -> Result<StepStats> {
        let mut tape = Tape::new();
        let out = self.run(&mut tape, batch, Mode::Eval)?;
        let factor = self.net.mask_factor();
        let terms = joint_loss(&mut tape, &out, &self.net.anchors, &batch.truths, factor, loss_cfg)?;
        Ok(StepStats {
            total: tape.value(terms.total).data()[0].as_f64(),
            classification: terms.classification,
            regression: terms.regression,
            segmentation: terms.segmentation,
        })
    }

    pub fn predict(&mut self, batch: &Batch, cfg: &DetectConfig) -> Result<Prediction> {
        let mut tape = Tape::new();
        let out = self.run(&mut tape, batch, Mode::Eval)?;
        let c = &self.net.config;
        let cls: Vec<f64> = tape.value(out.cls).data().iter().map(|v| v.as_f64()).collect();
        let reg: Vec<f64> = tape.value(out.reg).data().iter().map(|v| v.as_f64()).collect();
        let detections = decode_detections(
            &cls,
            &reg,
            &self.net.anchors,
            c.num_classes + 1,
            (c.image_width, c.image_height),
            cfg,
        );
        let grab = |vs: &[crate::tensor::Var]| vs.iter().map(|&v| tape.value(v).cast::<f32>()).collect();
        let (mask_logits_t, mask_logits_v) = match &out.trace {
            Some(tr) => (grab(&tr.mask_logits_t), grab(&tr.mask_logits_v)),
            None => (Vec::new(), Vec::new()),
        };
        Ok(Prediction {
            detections,
            mask_logits_t,
            mask_logits_v,
        })
    }

    /// Parameters followed by batch-norm buffers.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.grad = None;
                t.requires_grad = false;
                (p.name.clone(), t)
            })
            .collect();
        out.extend(self.net.buffers());
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        for p in self.params.iter_mut() {
            let t = find(&p.name).ok_or_else(|| Error::Config(format!("checkpoint lacks {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(&t.cast::<T>().into_data());
        }
        self.net
            .load_buffers(&|name| find(name).map(|t| t.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.state())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        self.load_state(&entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::anchors::generate_anchors;
    use crate::detector::boxes::{encode, BBox};
    use crate::detector::model::FusionMode;

    #[test]
    fn threshold_one_yields_nothing() {
        let anchors = generate_anchors(32, 32, &[16], &[vec![8.0]], &[1.0]).unwrap();
        let cls = vec![0.0; anchors.len() * 2];
        let reg = vec![0.0; anchors.len() * 4];
        let cfg = DetectConfig {
            conf_threshold: 1.0,
            ..Default::default()
        };
        let d = decode_detections(&cls, &reg, &anchors, 2, (32, 32), &cfg);
        assert_eq!(d, vec![Vec::<Detection>::new()]);
    }

    #[test]
    fn decodes_and_suppresses() {
        // two anchors in the same cell, both predicting the same box
        let anchors = generate_anchors(32, 32, &[32], &[vec![10.0, 12.0]], &[1.0]).unwrap();
        let target = BBox::new(6.0, 6.0, 20.0, 24.0);
        let mut reg = Vec::new();
        for a in &anchors {
            reg.extend(encode(&target, &a.bbox()));
        }
        let cls = vec![0.0, 3.0, 0.0, 3.0];
        let d = decode_detections(&cls, &reg, &anchors, 2, (32, 32), &DetectConfig::default());
        assert_eq!(d[0].len(), 1);
        let got = d[0][0].bbox;
        assert!((got.x1 - 6.0).abs() < 1e-9 && (got.y2 - 24.0).abs() < 1e-9);
        let p = 3f64.exp() / (1.0 + 3f64.exp());
        assert!((d[0][0].confidence - p).abs() < 1e-12);
    }

    #[test]
    fn state_round_trips_through_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Detector::<f32>::new(DetectorConfig::tiny(FusionMode::Cfr { loops: 2 }), 5).unwrap();
        a.save(&path).unwrap();
        let mut b = Detector::<f32>::new(DetectorConfig::tiny(FusionMode::Cfr { loops: 2 }), 6).unwrap();
        assert_ne!(a, b);
        b.load(&path).unwrap();
        assert_eq!(a, b);
        let names: Vec<String> = a.state().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| ["backbone_t.", "backbone_v.", "head.", "cfr."].iter().any(|p| n.starts_with(p))));
    }
}
