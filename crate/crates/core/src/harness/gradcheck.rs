//! The registered finite-difference suite: every differentiable op on its
//! own, the fuse-and-refine cycle, and the whole tiny detector under the
//! joint loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfr::{final_fusion, CfrBlock, CfrConfig};
use crate::detector::{joint_loss, BBox, DetectorConfig, Detector, FusionMode, GroundTruth, GtObject, LossConfig, Visibility};
use crate::tensor::gradcheck::{finite_diff_check, finite_diff_check_model, CheckOptions, GradCheckReport};
use crate::tensor::{BnConfig, BnStats, Fault, Mode, ParamSet, Tensor};

/// Deterministic pseudo-random projection weights.
fn wave(len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|i| (i as f64 * 0.37 + phase).sin()).collect()
}

fn op_checks(opts: CheckOptions, rng: &mut ChaCha8Rng) -> Vec<GradCheckReport> {
    let (n, c, h, w) = (2, 3, 5, 4);
    let x = Tensor::<f64>::randn(&[n, c, h, w], 1.0, rng);
    let x2 = Tensor::<f64>::randn(&[n, c, h, w], 1.0, rng);
    let wt = Tensor::<f64>::randn(&[2, c, 3, 3], 0.5, rng);
    let bias = Tensor::<f64>::randn(&[2], 0.5, rng);
    let gamma = Tensor::<f64>::uniform(&[c], 0.5, 1.5, rng);
    let beta = Tensor::<f64>::randn(&[c], 0.5, rng);
    let p = wave(n * c * h * w, 0.1);
    let mut out = Vec::new();
    for stride in [1, 2] {
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let cp = wave(n * 2 * ho * wo, 0.7);
        out.push(finite_diff_check(&format!("conv2d(stride {stride})"), &[x.clone(), wt.clone(), bias.clone()], opts, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            t.dot(y, &cp)
        }));
    }
    for (name, mode) in [("batchnorm2d(train)", Mode::Train), ("batchnorm2d(eval)", Mode::Eval)] {
        out.push(finite_diff_check(name, &[x.clone(), gamma.clone(), beta.clone()], opts, |t, v| {
            let mut stats = BnStats {
                running_mean: vec![0.3; c],
                running_var: vec![1.7; c],
            };
            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, BnConfig::default(), mode)?;
            t.dot(y, &p)
        }));
    }
    out.push(finite_diff_check("relu", std::slice::from_ref(&x), opts, |t, v| {
        let y = t.relu(v[0]);
        t.dot(y, &p)
    }));
    out.push(finite_diff_check("add", &[x.clone(), x2.clone()], opts, |t, v| {
        let y = t.add(v[0], v[1])?;
        t.dot(y, &p)
    }));
    out.push(finite_diff_check("mul_scalar", std::slice::from_ref(&x), opts, |t, v| {
        let y = t.mul_scalar(v[0], -1.3);
        t.dot(y, &p)
    }));
    out.push(finite_diff_check("mean_of_list", &[x.clone(), x2.clone(), x.map(|v| v * 0.5)], opts, |t, v| {
        let y = t.mean_of(v)?;
        t.dot(y, &p)
    }));
    out.push(finite_diff_check("maximum", &[x.clone(), x2.clone()], opts, |t, v| {
        let y = t.maximum(v[0], v[1])?;
        t.dot(y, &p)
    }));
    out.push(finite_diff_check("concat", &[x.clone(), x2.clone()], opts, |t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        let q = wave(t.value(y).len(), 0.3);
        t.dot(y, &q)
    }));
    let heads = Tensor::<f64>::randn(&[n, 6, 3, 2], 1.0, rng);
    out.push(finite_diff_check("anchor_rows", std::slice::from_ref(&heads), opts, |t, v| {
        let y = t.anchor_rows(v[0], 3)?;
        let q = wave(t.value(y).len(), 1.1);
        t.dot(y, &q)
    }));
    out.push(finite_diff_check("dot", std::slice::from_ref(&x), opts, |t, v| t.dot(v[0], &p)));
    out.push(finite_diff_check("sigmoid_bce", std::slice::from_ref(&x), opts, |t, v| {
        let target: Vec<f64> = (0..p.len()).map(|i| (i % 3 == 0) as u8 as f64).collect();
        t.sigmoid_bce(v[0], &target)
    }));
    let rows = Tensor::<f64>::randn(&[n, 9, 3], 1.0, rng);
    out.push(finite_diff_check("softmax_ce", std::slice::from_ref(&rows), opts, |t, v| {
        let labels: Vec<Option<usize>> = (0..n * 9).map(|i| (i % 4 != 1).then_some(i % 3)).collect();
        t.softmax_ce(v[0], &labels)
    }));
    let reg = Tensor::<f64>::randn(&[n, 9, 4], 2.0, rng);
    let reg_target = wave(n * 9 * 4, 2.0);
    out.push(finite_diff_check("smooth_l1", &[reg], opts, |t, v| {
        let sel: Vec<bool> = (0..n * 9).map(|i| i % 3 != 0).collect();
        t.smooth_l1(v[0], &reg_target, &sel)
    }));
    out
}

fn cfr_check(opts: CheckOptions, rng: &mut ChaCha8Rng) -> GradCheckReport {
    let mut ps = ParamSet::<f64>::new();
    let block = CfrBlock::new(&mut ps, CfrConfig::new(2, 3), rng).expect("valid config");
    let ft = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, rng);
    let fv = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, rng);
    let p = wave(2 * 2 * 4 * 4, 0.5);
    let m = wave(2 * 4 * 4, 0.9);
    finite_diff_check_model("cfr_cycle", &ps, &[ft, fv], opts, |t, ps, v| {
        let mut b = block.clone();
        let trace = b.run_cycle(t, ps, v[0], v[1], Mode::Train)?;
        let fused = final_fusion(t, &trace)?;
        let mut total = t.dot(fused, &p)?;
        for (&a, &b) in trace.mask_logits_t.iter().zip(&trace.mask_logits_v) {
            let da = t.dot(a, &m)?;
            let db = t.dot(b, &m)?;
            total = t.add(total, da)?;
            total = t.add(total, db)?;
        }
        Ok(total)
    })
}

/// Tiny detector: batch of one 16×16 pair, fusion width 2, two loops.
pub fn tiny_model_check(opts: CheckOptions, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = Detector::<f64>::new(DetectorConfig::tiny(FusionMode::Cfr { loops: 2 }), seed).expect("tiny config");
    let visible = Tensor::<f64>::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let thermal = Tensor::<f64>::uniform(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let gt = GroundTruth::from_objects(
        vec![GtObject {
            bbox: BBox::new(3.0, 2.0, 9.0, 14.0),
            class_id: 0,
            visibility: Visibility::Both,
        }],
        16,
        16,
    );
    // every negative is kept, so the selection cannot flip under perturbation
    let loss_cfg = LossConfig {
        neg_pos_ratio: 10_000,
        ..LossConfig::default()
    };
    finite_diff_check_model("tiny_model(joint_loss)", &det.params, &[visible, thermal], opts, |t, ps, v| {
        let mut net = det.net.clone();
        let out = net.forward(t, ps, v[0], v[1], Mode::Train)?;
        let factor = net.mask_factor();
        Ok(joint_loss(t, &out, &net.anchors, std::slice::from_ref(&gt), factor, &loss_cfg)?.total)
    })
}

/// Run everything. With `fault` set, the conv backward pass is corrupted and
/// the conv-dependent checks are expected to fail.
pub fn run_suite(fault: Option<Fault>) -> Vec<GradCheckReport> {
    let opts = CheckOptions {
        fault,
        ..CheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut reports = op_checks(opts, &mut rng);
    reports.push(cfr_check(opts, &mut rng));
    reports.push(tiny_model_check(opts, 3));
    reports
}

/// One line per check: name, verdict, max relative error, probes.
pub fn format_report(reports: &[GradCheckReport]) -> String {
    let mut s = String::from("op\tstatus\tmax_rel_err\tcoords\n");
    for r in reports {
        s.push_str(&format!(
            "{}\t{}\t{:.3e}\t{}{}\n",
            r.op,
            if r.passed { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.coords_checked,
            r.failure.as_deref().map(|f| format!("\t{f}")).unwrap_or_default()
        ));
    }
    s
}
