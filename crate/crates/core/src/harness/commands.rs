//! The five subcommands as library calls. Each writes its artifacts under a
//! directory and embeds the resolved config in them.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::RunConfig;
use super::gradcheck::{format_report, run_suite};
use super::run::{config_pairs, evaluate, train, EpochLog, Evaluation};
use crate::detector::{Batch, Detector};
use crate::error::{Error, Result};
use crate::metrics::{binarize_logits, time_calls, write_pgm, EvalReport, TimingStats, MIN_WARMUP};
use crate::synth::{generate_dataset, load_split, read_manifest, DatasetManifest, Split};
use crate::synth::SpectralSample;
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::io::{load_checkpoint, save_checkpoint};
use crate::tensor::{Fault, Tensor};

/// Checkpoint entry holding the TOML config, one byte per element.
pub const CONFIG_ENTRY: &str = "meta.config";
/// Mask dumps are written for this many leading test images.
pub const MASK_DUMP_LIMIT: usize = 8;
/// Environment variable capping the ablation worker count.
pub const THREADS_ENV: &str = "CFR_THREADS";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn commented_config(cfg: &RunConfig) -> String {
    cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect()
}

pub fn gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    generate_dataset(&cfg.scene_spec()?, cfg.n_train, cfg.n_test, cfg.data_seed, &cfg.data_dir)
}

/// Load a split, failing with a hint when the dataset was never generated.
pub fn load_samples(cfg: &RunConfig, split: Split) -> Result<Vec<SpectralSample>> {
    let manifest = read_manifest(&cfg.data_dir).map_err(|e| match e {
        Error::Io { path, .. } => Error::Config(format!(
            "no dataset at {} (missing {}); run gen-data first",
            cfg.data_dir.display(),
            path.display()
        )),
        other => other,
    })?;
    if manifest.seed != cfg.data_seed {
        return Err(Error::Config(format!(
            "dataset at {} was generated with data_seed {}, config says {}",
            cfg.data_dir.display(),
            manifest.seed,
            cfg.data_seed
        )));
    }
    load_split(&cfg.data_dir, split)
}

pub fn save_run_checkpoint(det: &Detector, cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = cfg.to_toml();
    let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
    let mut entries = det.state();
    entries.push((CONFIG_ENTRY.to_string(), Tensor::from_vec(&[bytes.len()], bytes)?));
    save_checkpoint(path, &entries)
}

/// Rebuild a detector from a checkpoint written by [`save_run_checkpoint`],
/// returning the config it was trained with.
pub fn load_run_checkpoint(path: &Path) -> Result<(Detector, RunConfig)> {
    let entries = load_checkpoint(path)?;
    let meta = entries
        .iter()
        .find(|(n, _)| n == CONFIG_ENTRY)
        .ok_or_else(|| Error::format(path, "checkpoint carries no config"))?;
    let bytes: Vec<u8> = meta.1.data().iter().map(|&v| v as u8).collect();
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let cfg = RunConfig::from_toml(&text)?;
    let mut det = Detector::<f32>::new(cfg.detector_config()?, cfg.seed)?;
    det.load_state(&entries)?;
    Ok((det, cfg))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub logs: Vec<EpochLog>,
}

/// Train on the train split. Writes `config.toml`, `train.log`, periodic
/// `epoch_NNN.ckpt` files and `final.ckpt` under `out_dir`.
pub fn train_run(cfg: &RunConfig, out_dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let samples = load_samples(cfg, Split::Train)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let mut log = commented_config(cfg);
    log.push_str(EpochLog::header());
    log.push('\n');
    let log_path = out_dir.join("train.log");
    write_file(&log_path, &log)?;
    let (det, logs) = train(cfg, cfg.detector_config()?, &samples, |entry, det| {
        let line = entry.line();
        progress(&line);
        log.push_str(&line);
        log.push('\n');
        write_file(&log_path, &log)?;
        if cfg.checkpoint_every > 0 && entry.epoch % cfg.checkpoint_every == 0 && entry.epoch < cfg.epochs {
            save_run_checkpoint(det, cfg, &out_dir.join(format!("epoch_{:03}.ckpt", entry.epoch)))?;
        }
        Ok(())
    })?;
    let final_checkpoint = out_dir.join("final.ckpt");
    save_run_checkpoint(&det, cfg, &final_checkpoint)?;
    Ok(TrainOutcome { final_checkpoint, logs })
}

/// Median single-image inference time of `det` in eval mode.
pub fn time_inference(det: &mut Detector, sample: &SpectralSample, cfg: &RunConfig) -> Result<TimingStats> {
    let batch = Batch::from_samples(&[sample])?;
    let detect_cfg = cfg.detect_config();
    time_calls(MIN_WARMUP, cfg.timing_iterations, || det.predict(&batch, &detect_cfg).map(|_| ()))
}

fn detections_csv(eval: &Evaluation, samples: &[SpectralSample]) -> String {
    let mut s = String::from("image_id,class,x1,y1,x2,y2,confidence\n");
    for (sample, dets) in samples.iter().zip(&eval.detections) {
        for d in dets {
            let class = eval.report.class_names.get(d.class_id).cloned().unwrap_or_else(|| d.class_id.to_string());
            let _ = writeln!(
                s,
                "{},{class},{:.4},{:.4},{:.4},{:.4},{:.6}",
                sample.meta.id, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.confidence
            );
        }
    }
    s
}

fn dump_masks(det: &mut Detector, samples: &[SpectralSample], cfg: &RunConfig, dir: &Path) -> Result<()> {
    let head = &samples[..samples.len().min(MASK_DUMP_LIMIT)];
    if head.is_empty() || det.config().fusion.loops() == 0 {
        return Ok(());
    }
    create_dir(dir)?;
    let refs: Vec<&SpectralSample> = head.iter().collect();
    let pred = det.predict(&Batch::from_samples(&refs)?, &cfg.detect_config())?;
    for (i, (mt, mv)) in pred.mask_logits_t.iter().zip(&pred.mask_logits_v).enumerate() {
        for (n, sample) in head.iter().enumerate() {
            let id = &sample.meta.id;
            write_pgm(&dir.join(format!("{id}_loop{}_thermal.pgm", i + 1)), &binarize_logits(&mt.batch_item(n)?))?;
            write_pgm(&dir.join(format!("{id}_loop{}_visible.pgm", i + 1)), &binarize_logits(&mv.batch_item(n)?))?;
        }
    }
    Ok(())
}

/// Evaluate a checkpoint on the test split of `cfg`'s dataset. The model
/// architecture comes from the checkpoint; data and thresholds from `cfg`.
/// Writes `report.txt`, `detections.csv`, `masks/*.pgm` and `timing.txt`
/// (the only file with wall-clock content).
pub fn eval_run(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<Evaluation> {
    let (mut det, trained) = load_run_checkpoint(checkpoint)?;
    let samples = load_samples(cfg, Split::Test)?;
    let mut eval = evaluate(&mut det, &samples, cfg)?;
    eval.report
        .provenance
        .extend(config_pairs(&trained).into_iter().map(|(k, v)| (format!("trained.{k}"), v)));
    create_dir(out_dir)?;
    write_file(&out_dir.join("report.txt"), &eval.report.to_text())?;
    write_file(&out_dir.join("detections.csv"), &detections_csv(&eval, &samples))?;
    dump_masks(&mut det, &samples, cfg, &out_dir.join("masks"))?;
    let t = time_inference(&mut det, &samples[0], cfg)?;
    let loops = det.config().fusion.loops();
    write_file(
        &out_dir.join("timing.txt"),
        &format!(
            "loops\tmedian_ms\tiqr_ms\tmean_ms\titerations\n{loops}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            t.median_ms, t.iqr_ms, t.mean_ms, t.iterations
        ),
    )?;
    eval.report.inference_ms = vec![(loops, t.median_ms)];
    Ok(eval)
}

/// One (loop count, seed) cell of the sweep. `report` is `None` when the
/// cell failed; `error` says why.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub loops: usize,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub median_ms: Option<f64>,
    pub error: Option<String>,
}

/// Mean over the successful seeds of one loop count.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub loops: usize,
    pub seeds_ok: usize,
    pub seeds_total: usize,
    pub map: Option<f64>,
    pub lamr: Option<f64>,
    pub dice: Vec<f64>,
    pub median_ms: Option<f64>,
}

pub fn row_label(loops: usize) -> String {
    if loops == 0 {
        "Baseline".into()
    } else {
        format!("CFR_{loops}")
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Arithmetic means per loop count, in first-seen order of `cells`.
pub fn aggregate(cells: &[AblationCell]) -> Vec<AblationRow> {
    let mut loop_counts: Vec<usize> = Vec::new();
    for c in cells {
        if !loop_counts.contains(&c.loops) {
            loop_counts.push(c.loops);
        }
    }
    loop_counts
        .into_iter()
        .map(|loops| {
            let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.loops == loops).collect();
            let ok: Vec<&EvalReport> = mine.iter().filter_map(|c| c.report.as_ref()).collect();
            let dice = (0..loops)
                .map(|i| mean_present(ok.iter().map(|r| r.dice_per_loop.get(i).copied())).unwrap_or(f64::NAN))
                .collect();
            AblationRow {
                loops,
                seeds_ok: ok.len(),
                seeds_total: mine.len(),
                map: mean_present(ok.iter().map(|r| r.map)),
                lamr: mean_present(ok.iter().map(|r| r.log_average_miss_rate)),
                dice: if ok.is_empty() { Vec::new() } else { dice },
                median_ms: mean_present(mine.iter().map(|c| c.median_ms)),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| format!("{x:.4}"))
}

/// Table with one row per loop count: miss rate, mAP and DICE_1..DICE_I,
/// means first, then every seed. Timing is left out so that the table is
/// reproducible; it goes to the CSV.
pub fn ablation_table(cfg: &RunConfig, cells: &[AblationCell]) -> String {
    let mut s = commented_config(cfg);
    let rows = aggregate(cells);
    let max_loops = rows.iter().map(|r| r.loops).max().unwrap_or(0);
    let dice_header: String = (1..=max_loops).map(|i| format!("\tDICE_{i}")).collect();
    let _ = writeln!(s, "\n[mean]\nmodel\tseeds\tlamr\tmap{dice_header}");
    for r in &rows {
        let mut fields = vec![row_label(r.loops), format!("{}/{}", r.seeds_ok, r.seeds_total), fmt_opt(r.lamr), fmt_opt(r.map)];
        fields.extend(r.dice.iter().map(|d| format!("{d:.4}")));
        let _ = writeln!(s, "{}", fields.join("\t"));
    }
    let _ = writeln!(s, "\n[per_seed]\nmodel\tseed\tlamr\tmap{dice_header}");
    for c in cells {
        let mut fields = vec![row_label(c.loops), c.seed.to_string()];
        match &c.report {
            Some(r) => {
                fields.push(fmt_opt(r.log_average_miss_rate));
                fields.push(fmt_opt(r.map));
                fields.extend(r.dice_per_loop.iter().map(|d| format!("{d:.4}")));
            }
            None => {
                fields.extend(["absent".to_string(), "absent".to_string()]);
                fields.push(format!("# {}", c.error.as_deref().unwrap_or("failed")));
            }
        }
        let _ = writeln!(s, "{}", fields.join("\t"));
    }
    s
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let max_loops = cells.iter().map(|c| c.loops).max().unwrap_or(0);
    let mut s = format!("loops,seed,ok,median_ms,{}\n", EvalReport::csv_header(max_loops));
    for c in cells {
        let row = c.report.as_ref().map_or_else(|| ",".to_string(), EvalReport::csv_row);
        let ms = c.median_ms.map_or(String::new(), |m| format!("{m:.4}"));
        let _ = writeln!(s, "{},{},{},{ms},{row}", c.loops, c.seed, c.report.is_some());
    }
    s
}

/// Worker count: `CFR_THREADS` when set, else the available parallelism.
pub fn worker_count(cells: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(cells).max(1)
}

fn run_cell(cfg: &RunConfig, loops: usize, seed: u64, train_set: &[SpectralSample], test_set: &[SpectralSample]) -> Result<(EvalReport, Option<f64>)> {
    let cell_cfg = RunConfig {
        seed,
        ..cfg.with_loops(loops)
    };
    let (mut det, _) = train(&cell_cfg, cell_cfg.detector_config()?, train_set, |_, _| Ok(()))?;
    let eval = evaluate(&mut det, test_set, &cell_cfg)?;
    let ms = if cell_cfg.timing_iterations > 0 {
        Some(time_inference(&mut det, &test_set[0], &cell_cfg)?.median_ms)
    } else {
        None
    };
    Ok((eval.report, ms))
}

/// Train and evaluate every (loop count, seed) cell on a fixed dataset.
/// Cells run on independent worker threads; a failing or panicking cell is
/// recorded as absent and the sweep continues.
pub fn run_ablation(
    cfg: &RunConfig,
    loop_counts: &[usize],
    seeds: &[u64],
    train_set: &[SpectralSample],
    test_set: &[SpectralSample],
    progress: &(dyn Fn(&AblationCell) + Sync),
) -> Vec<AblationCell> {
    let jobs: Vec<(usize, u64)> = loop_counts.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let results: Mutex<Vec<Option<AblationCell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(loops, seed)) = jobs.get(i) else { break };
                let outcome = catch_unwind(AssertUnwindSafe(|| run_cell(cfg, loops, seed, train_set, test_set)))
                    .unwrap_or_else(|_| Err(Error::Config("worker panicked".into())));
                let cell = match outcome {
                    Ok((report, median_ms)) => AblationCell {
                        loops,
                        seed,
                        report: Some(report),
                        median_ms,
                        error: None,
                    },
                    Err(e) => AblationCell {
                        loops,
                        seed,
                        report: None,
                        median_ms: None,
                        error: Some(e.to_string()),
                    },
                };
                progress(&cell);
                results.lock().expect("results lock")[i] = Some(cell);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect()
}

/// Sweep `cfg.ablate_loops` × seeds `cfg.seed..cfg.seed + ablate_seeds`,
/// writing `ablation.txt` and `ablation.csv` under `out_dir`.
pub fn ablate_run(cfg: &RunConfig, out_dir: &Path, progress: &(dyn Fn(&AblationCell) + Sync)) -> Result<Vec<AblationCell>> {
    let train_set = load_samples(cfg, Split::Train)?;
    let test_set = load_samples(cfg, Split::Test)?;
    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|s| cfg.seed + s).collect();
    let cells = run_ablation(cfg, &cfg.ablate_loops, &seeds, &train_set, &test_set, progress);
    create_dir(out_dir)?;
    write_file(&out_dir.join("ablation.txt"), &ablation_table(cfg, &cells))?;
    write_file(&out_dir.join("ablation.csv"), &ablation_csv(&cells))?;
    Ok(cells)
}

/// Run the gradient suite and write `gradcheck.txt` when `out_dir` is set.
pub fn gradcheck_run(fault: Option<Fault>, out_dir: Option<&Path>) -> Result<Vec<GradCheckReport>> {
    let reports = run_suite(fault);
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_file(&dir.join("gradcheck.txt"), &format_report(&reports))?;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(loops: usize, seed: u64, map: Option<f64>, dice: Vec<f64>) -> AblationCell {
        AblationCell {
            loops,
            seed,
            report: map.map(|m| EvalReport {
                map: Some(m),
                log_average_miss_rate: Some(1.0 - m),
                dice_per_loop: dice,
                ..EvalReport::default()
            }),
            median_ms: Some(1.0),
            error: map.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn aggregate_is_the_arithmetic_mean_of_present_cells() {
        let cells = vec![
            cell(0, 0, Some(0.5), vec![]),
            cell(0, 1, Some(0.7), vec![]),
            cell(2, 0, Some(0.6), vec![0.5, 0.9]),
            cell(2, 1, None, vec![]),
            cell(2, 2, Some(0.8), vec![0.7, 0.8]),
        ];
        let rows = aggregate(&cells);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].map.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!((rows[1].seeds_ok, rows[1].seeds_total), (2, 3));
        assert!((rows[1].map.unwrap() - 0.7).abs() < 1e-12);
        assert!((rows[1].dice[0] - 0.6).abs() < 1e-12);
        assert!((rows[1].dice[1] - 0.85).abs() < 1e-12);
    }

    #[test]
    fn table_has_one_dice_column_per_loop() {
        let cells = vec![
            cell(0, 0, Some(0.5), vec![]),
            cell(1, 0, Some(0.6), vec![0.5]),
            cell(3, 0, Some(0.6), vec![0.5, 0.6, 0.7]),
        ];
        let table = ablation_table(&RunConfig::default(), &cells);
        let mean: Vec<&str> = table
            .split("[mean]")
            .nth(1)
            .unwrap()
            .split("[per_seed]")
            .next()
            .unwrap()
            .lines()
            .filter(|l| l.starts_with("Baseline") || l.starts_with("CFR_"))
            .collect();
        assert_eq!(mean.len(), 3);
        for (line, loops) in mean.iter().zip([0, 1, 3]) {
            assert_eq!(line.split('\t').count(), 4 + loops, "{line}");
        }
    }

    #[test]
    fn failed_cells_are_absent() {
        let cells = vec![cell(1, 0, None, vec![])];
        let table = ablation_table(&RunConfig::default(), &cells);
        assert!(table.contains("CFR_1\t0\tabsent\tabsent\t# boom"), "{table}");
        assert_eq!(aggregate(&cells)[0].map, None);
    }

    #[test]
    fn threads_env_caps_workers() {
        assert_eq!(worker_count(1), 1);
        assert!(worker_count(64) >= 1);
    }
}
