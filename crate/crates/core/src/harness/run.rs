//! Training and evaluation on in-memory samples.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::detector::augment::augment_pair;
use crate::detector::{Batch, Detection, Detector, DetectorConfig, FusionMode};
use crate::error::{Error, Result};
use crate::metrics::{
    binarize_logits, dice_score, log_average_miss_rate, mean_average_precision, recall_at_fppi, timing_stats,
    EvalReport, ImageTruth, MissRateConfig,
};
use crate::synth::SpectralSample;
use crate::tensor::Sgd;

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub joint: f64,
    pub detection: f64,
    pub segmentation: f64,
}

impl EpochLog {
    pub fn header() -> &'static str {
        "epoch\tlr\tjoint\tdetection\tsegmentation"
    }

    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.9}\t{:.9}\t{:.9}",
            self.epoch, self.lr, self.joint, self.detection, self.segmentation
        )
    }
}

/// Step schedule: full rate, then a tenth for the last quarter of epochs.
pub fn learning_rate(base: f64, epoch: usize, epochs: usize) -> f64 {
    if 4 * epoch >= 3 * epochs {
        base * 0.1
    } else {
        base
    }
}

/// Train a fresh detector. `on_epoch` sees every epoch's log and the model
/// after it (for checkpoints and progress output).
pub fn train<F>(cfg: &RunConfig, det_cfg: DetectorConfig, samples: &[SpectralSample], mut on_epoch: F) -> Result<(Detector, Vec<EpochLog>)>
where
    F: FnMut(&EpochLog, &Detector) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut det = Detector::<f32>::new(det_cfg, cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum).with_weight_decay(cfg.weight_decay);
    let loss_cfg = cfg.loss_config();
    // a separate stream from the weight init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = learning_rate(cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut joint, mut detection, mut segmentation, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<SpectralSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment_pair(&samples[i], &mut rng)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SpectralSample> = items.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let stats = det.train_step(&batch, &loss_cfg, &mut opt).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {} batch {b}: {msg}", epoch + 1)),
                other => other,
            })?;
            joint += stats.total;
            detection += stats.detection();
            segmentation += stats.segmentation;
            batches += 1;
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            lr: opt.lr,
            joint: joint / n,
            detection: detection / n,
            segmentation: segmentation / n,
        };
        on_epoch(&log, &det)?;
        logs.push(log);
    }
    Ok((det, logs))
}

/// Eval-mode outputs over a sample set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub detections: Vec<Vec<Detection>>,
    pub truths: Vec<ImageTruth>,
}

pub const EVAL_BATCH: usize = 16;

/// Which class the miss rate is measured on: `person` when present.
fn miss_rate_class(names: &[String]) -> usize {
    names.iter().position(|n| n == "person").unwrap_or(0)
}

/// Detections and, for CFR models, per-loop mask DICE on `samples`.
pub fn evaluate(det: &mut Detector, samples: &[SpectralSample], cfg: &RunConfig) -> Result<Evaluation> {
    let detect_cfg = cfg.detect_config();
    let loops = det.config().fusion.loops();
    let mut detections = Vec::with_capacity(samples.len());
    let mut dice_sums = vec![0.0; loops];
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SpectralSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let pred = det.predict(&batch, &detect_cfg)?;
        detections.extend(pred.detections);
        for (i, (mt, mv)) in pred.mask_logits_t.iter().zip(&pred.mask_logits_v).enumerate() {
            for n in 0..batch.len() {
                let a = binarize_logits(&mt.batch_item(n)?);
                let b = binarize_logits(&mv.batch_item(n)?);
                dice_sums[i] += dice_score(&a, &b)?;
            }
        }
    }
    let truths: Vec<ImageTruth> = samples.iter().map(|s| s.gt.boxes_with_classes()).collect();
    let names = cfg.class_names();
    let (per_class_ap, map) = mean_average_precision(&detections, &truths, names.len(), 0.5);
    let mr_class = miss_rate_class(&names);
    let (mr_dets, mr_truths) = class_subset(&detections, &truths, mr_class);
    let mr_cfg = MissRateConfig::for_image_height(det.config().image_height);
    let lamr = log_average_miss_rate(&mr_dets, &mr_truths, &mr_cfg);
    let mut provenance = vec![("fusion".to_string(), det.config().fusion.to_string())];
    provenance.extend(config_pairs(cfg));
    Ok(Evaluation {
        report: EvalReport {
            class_names: names,
            per_class_ap,
            map,
            log_average_miss_rate: lamr,
            dice_per_loop: dice_sums.iter().map(|s| s / samples.len() as f64).collect(),
            inference_ms: Vec::new(),
            provenance,
        },
        detections,
        truths,
    })
}

/// Detections and truths restricted to one class.
pub fn class_subset(dets: &[Vec<Detection>], truths: &[ImageTruth], class: usize) -> (Vec<Vec<Detection>>, Vec<ImageTruth>) {
    (
        dets.iter()
            .map(|d| d.iter().filter(|x| x.class_id == class).copied().collect())
            .collect(),
        truths
            .iter()
            .map(|t| t.iter().filter(|(_, c)| *c == class).copied().collect())
            .collect(),
    )
}

/// Recall at `fppi` on the miss-rate class.
pub fn recall_at(eval: &Evaluation, image_height: usize, fppi: f64) -> Option<f64> {
    let class = miss_rate_class(&eval.report.class_names);
    let (d, t) = class_subset(&eval.detections, &eval.truths, class);
    recall_at_fppi(&d, &t, &MissRateConfig::for_image_height(image_height), fppi)
}

/// Flattened `key = value` view of the TOML config.
pub fn config_pairs(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.to_toml()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Eval-mode inference times (ms) of one sample for each loop count, all
/// other settings equal; loop count 0 is the average-fusion baseline.
/// Returns one row per measured round, one entry per loop count. Calls are
/// interleaved round-robin so that a slow spell on a shared machine lands on
/// every configuration alike.
pub fn timing_rounds(
    base: &DetectorConfig,
    sample: &SpectralSample,
    loop_counts: &[usize],
    warmup: usize,
    iterations: usize,
) -> Result<Vec<Vec<f64>>> {
    crate::metrics::check_timing_budget(warmup, iterations)?;
    let batch = Batch::from_samples(&[sample])?;
    let detect_cfg = crate::detector::DetectConfig::default();
    let mut models = loop_counts
        .iter()
        .map(|&loops| {
            Detector::<f32>::new(
                DetectorConfig {
                    fusion: FusionMode::from_loops(loops),
                    ..base.clone()
                },
                0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for d in &mut models {
        for _ in 0..warmup {
            d.predict(&batch, &detect_cfg)?;
        }
    }
    let mut rounds = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut row = Vec::with_capacity(models.len());
        for d in &mut models {
            let t = Instant::now();
            d.predict(&batch, &detect_cfg)?;
            row.push(t.elapsed().as_secs_f64() * 1e3);
        }
        rounds.push(row);
    }
    Ok(rounds)
}

/// Median and dispersion of [`timing_rounds`] per loop count.
pub fn timing_profile(
    base: &DetectorConfig,
    sample: &SpectralSample,
    loop_counts: &[usize],
    warmup: usize,
    iterations: usize,
) -> Result<Vec<(usize, crate::metrics::TimingStats)>> {
    let rounds = timing_rounds(base, sample, loop_counts, warmup, iterations)?;
    Ok(loop_counts
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, timing_stats(rounds.iter().map(|r| r[i]).collect())))
        .collect())
}

/// Cost of each extra loop: the median over rounds of `t(I+1) - t(I)`
/// measured within the same round, for each consecutive pair in `loop_counts`.
pub fn marginal_loop_costs(rounds: &[Vec<f64>], loop_counts: &[usize]) -> Vec<(usize, f64)> {
    loop_counts
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let diffs: Vec<f64> = rounds.iter().map(|r| r[i + 1] - r[i]).collect();
            (w[1], timing_stats(diffs).median_ms)
        })
        .collect()
}
