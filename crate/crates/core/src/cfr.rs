//! Cyclic fuse-and-refine block.
//!
//! Each loop concatenates the thermal and visible features, fuses them with
//! one shared 3×3 convolution followed by batch norm, and adds the fused map
//! back onto both spectral streams through a ReLU:
//!
//! ```text
//! f_f[i] = BN(conv3x3(concat(f_t[i-1], f_v[i-1])))
//! f_t[i] = relu(f_t[i-1] + f_f[i])
//! f_v[i] = relu(f_v[i-1] + f_f[i])
//! ```
//!
//! After every loop each refined stream predicts a segmentation mask through
//! a 1×1 head. The block output is the mean of all `2·I` refined features.
//! The parameter set is the same whatever the loop count.

use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnConfig, BnStats, Init, Mode, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

pub const MAX_LOOPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfrConfig {
    /// Channel width of both spectral streams and of the fused map.
    pub channels: usize,
    /// Number of fuse-and-refine loops; 0 means the block is bypassed.
    pub loops: usize,
    pub bn: BnConfig,
    /// One set of running statistics for every loop (default) or one per loop.
    pub shared_bn_stats: bool,
}

impl CfrConfig {
    pub fn new(channels: usize, loops: usize) -> Self {
        Self {
            channels,
            loops,
            bn: BnConfig::default(),
            shared_bn_stats: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("cfr channels must be positive".into()));
        }
        if self.loops > MAX_LOOPS {
            return Err(Error::Config(format!(
                "cfr loops must be in [0, {MAX_LOOPS}], got {}",
                self.loops
            )));
        }
        if !(self.bn.eps > 0.0) {
            return Err(Error::Config("batch-norm eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Handles to the block's parameters inside a model-wide [`ParamSet`], plus
/// its batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CfrParams<T: Scalar> {
    pub fuse_weight: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub seg_t_weight: ParamId,
    pub seg_t_bias: ParamId,
    pub seg_v_weight: ParamId,
    pub seg_v_bias: ParamId,
    /// Length 1 when statistics are shared, `MAX_LOOPS` otherwise.
    pub bn_stats: Vec<BnStats<T>>,
}

impl<T: Scalar> CfrParams<T> {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet<T>, config: &CfrConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let fuse_weight = ps.add(
            "cfr.fuse_weight",
            &[c, 2 * c, 3, 3],
            Init::HeNormal { fan_in: 2 * c * 9 },
            rng,
        )?;
        let bn_gamma = ps.add("cfr.bn.gamma", &[c], Init::Constant(1.0), rng)?;
        let bn_beta = ps.add("cfr.bn.beta", &[c], Init::Constant(0.0), rng)?;
        let seg_t_weight = ps.add("cfr.seg_t.weight", &[1, c, 1, 1], Init::HeNormal { fan_in: c }, rng)?;
        let seg_t_bias = ps.add("cfr.seg_t.bias", &[1], Init::Constant(0.0), rng)?;
        let seg_v_weight = ps.add("cfr.seg_v.weight", &[1, c, 1, 1], Init::HeNormal { fan_in: c }, rng)?;
        let seg_v_bias = ps.add("cfr.seg_v.bias", &[1], Init::Constant(0.0), rng)?;
        let copies = if config.shared_bn_stats { 1 } else { MAX_LOOPS };
        Ok(Self {
            fuse_weight,
            bn_gamma,
            bn_beta,
            seg_t_weight,
            seg_t_bias,
            seg_v_weight,
            seg_v_bias,
            bn_stats: vec![BnStats::new(c); copies],
        })
    }

    fn ids(&self) -> [ParamId; 7] {
        [
            self.fuse_weight,
            self.bn_gamma,
            self.bn_beta,
            self.seg_t_weight,
            self.seg_t_bias,
            self.seg_v_weight,
            self.seg_v_bias,
        ]
    }

    /// Trainable scalars owned by the block.
    pub fn parameter_count(&self, ps: &ParamSet<T>) -> usize {
        self.ids().iter().map(|&id| ps.get(id).value.len()).sum()
    }

    /// Running statistics as named buffers for checkpoints.
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.bn_stats.iter().enumerate() {
            let suffix = if self.bn_stats.len() == 1 {
                String::new()
            } else {
                format!(".{i}")
            };
            let c = s.running_mean.len();
            out.push((
                format!("cfr.bn.running_mean{suffix}"),
                Tensor::from_vec(&[c], s.running_mean.clone()).expect("shape"),
            ));
            out.push((
                format!("cfr.bn.running_var{suffix}"),
                Tensor::from_vec(&[c], s.running_var.clone()).expect("shape"),
            ));
        }
        out
    }

    pub fn load_buffers(&mut self, lookup: &dyn Fn(&str) -> Option<Vec<T>>) -> Result<()> {
        let single = self.bn_stats.len() == 1;
        for (i, s) in self.bn_stats.iter_mut().enumerate() {
            let suffix = if single { String::new() } else { format!(".{i}") };
            for (name, dst) in [
                (format!("cfr.bn.running_mean{suffix}"), &mut s.running_mean),
                (format!("cfr.bn.running_var{suffix}"), &mut s.running_var),
            ] {
                let v = lookup(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
                if v.len() != dst.len() {
                    return Err(Error::Config(format!("{name} has wrong length")));
                }
                *dst = v;
            }
        }
        Ok(())
    }
}

/// Per-loop record of the unrolled cycle. Entry `i` holds loop `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CfrTrace {
    pub f_t: Vec<Var>,
    pub f_v: Vec<Var>,
    pub f_f: Vec<Var>,
    pub mask_logits_t: Vec<Var>,
    pub mask_logits_v: Vec<Var>,
}

impl CfrTrace {
    pub fn loops(&self) -> usize {
        self.f_t.len()
    }

    /// First `k` loops only.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            f_t: self.f_t[..k].to_vec(),
            f_v: self.f_v[..k].to_vec(),
            f_f: self.f_f[..k].to_vec(),
            mask_logits_t: self.mask_logits_t[..k].to_vec(),
            mask_logits_v: self.mask_logits_v[..k].to_vec(),
        }
    }
}

fn check_pair<T: Scalar>(op: &'static str, tape: &Tape<T>, a: Var, b: Var, channels: usize) -> Result<()> {
    let sa = tape.value(a).dims4()?;
    let sb = tape.value(b).dims4()?;
    if sa != sb {
        return Err(Error::contract(op, format!("stream shapes differ: {sa:?} vs {sb:?}")));
    }
    if sa[1] != channels {
        return Err(Error::contract(
            op,
            format!("expected {channels} channels, got {}", sa[1]),
        ));
    }
    Ok(())
}

/// The fuse-and-refine block: configuration plus parameter handles.
#[derive(Debug, Clone, PartialEq)]
pub struct CfrBlock<T: Scalar> {
    pub config: CfrConfig,
    pub params: CfrParams<T>,
}

impl<T: Scalar> CfrBlock<T> {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet<T>, config: CfrConfig, rng: &mut R) -> Result<Self> {
        let params = CfrParams::new(ps, &config, rng)?;
        Ok(Self { config, params })
    }

    fn stats_slot(&self, loop_index: usize) -> usize {
        if self.config.shared_bn_stats {
            0
        } else {
            loop_index
        }
    }

    /// `BN(conv3x3(concat(f_t, f_v)))` with the shared weights. `loop_index`
    /// only selects the statistics slot when they are not shared.
    pub fn fuse_step(
        &mut self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        f_t: Var,
        f_v: Var,
        loop_index: usize,
        mode: Mode,
    ) -> Result<Var> {
        check_pair("fuse_step", tape, f_t, f_v, self.config.channels)?;
        let w = ps.bind(tape, self.params.fuse_weight);
        let gamma = ps.bind(tape, self.params.bn_gamma);
        let beta = ps.bind(tape, self.params.bn_beta);
        let cat = tape.concat_channels(f_t, f_v)?;
        let conv = tape.conv2d(cat, w, None, 1, 1)?;
        let slot = self.stats_slot(loop_index);
        let stats = self
            .params
            .bn_stats
            .get_mut(slot)
            .ok_or_else(|| Error::contract("fuse_step", format!("no statistics slot {slot}")))?;
        tape.batch_norm(conv, gamma, beta, stats, self.config.bn, mode)
    }

    /// `relu(f_prev + f_f)`.
    pub fn refine_step(tape: &mut Tape<T>, f_prev: Var, f_f: Var) -> Result<Var> {
        let s = tape.add(f_prev, f_f)?;
        Ok(tape.relu(s))
    }

    /// Segmentation logits `[N, 1, H, W]` for each stream.
    pub fn predict_masks(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        f_t: Var,
        f_v: Var,
    ) -> Result<(Var, Var)> {
        check_pair("predict_masks", tape, f_t, f_v, self.config.channels)?;
        let wt = ps.bind(tape, self.params.seg_t_weight);
        let bt = ps.bind(tape, self.params.seg_t_bias);
        let wv = ps.bind(tape, self.params.seg_v_weight);
        let bv = ps.bind(tape, self.params.seg_v_bias);
        let mt = tape.conv2d(f_t, wt, Some(bt), 1, 0)?;
        let mv = tape.conv2d(f_v, wv, Some(bv), 1, 0)?;
        Ok((mt, mv))
    }

    /// Unrolled cycle of `config.loops` iterations.
    pub fn run_cycle(
        &mut self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        f_t0: Var,
        f_v0: Var,
        mode: Mode,
    ) -> Result<CfrTrace> {
        if self.config.loops == 0 {
            return Err(Error::contract(
                "run_cycle",
                "loop count 0 bypasses the block; use baseline fusion",
            ));
        }
        self.config.validate()?;
        let mut trace = CfrTrace::default();
        let (mut ft, mut fv) = (f_t0, f_v0);
        for i in 0..self.config.loops {
            let ff = self.fuse_step(tape, ps, ft, fv, i, mode)?;
            ft = Self::refine_step(tape, ft, ff)?;
            fv = Self::refine_step(tape, fv, ff)?;
            let (mt, mv) = self.predict_masks(tape, ps, ft, fv)?;
            trace.f_f.push(ff);
            trace.f_t.push(ft);
            trace.f_v.push(fv);
            trace.mask_logits_t.push(mt);
            trace.mask_logits_v.push(mv);
        }
        Ok(trace)
    }
}

/// Mean of every refined thermal and visible feature in the trace.
pub fn final_fusion<T: Scalar>(tape: &mut Tape<T>, trace: &CfrTrace) -> Result<Var> {
    if trace.loops() == 0 || trace.f_v.len() != trace.f_t.len() {
        return Err(Error::contract("final_fusion", "trace must hold at least one loop"));
    }
    let all: Vec<Var> = trace.f_t.iter().chain(&trace.f_v).copied().collect();
    tape.mean_of(&all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineStrategy {
    Average,
    Max,
    ConcatConv,
}

impl FromStr for BaselineStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            "concat_conv" => Ok(Self::ConcatConv),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

impl BaselineStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Max => "max",
            Self::ConcatConv => "concat_conv",
        }
    }
}

/// 1×1 convolution `2C → C` used by the concat-conv baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcatConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConcatConvParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            weight: ps.add(
                "fusion.concat_conv.weight",
                &[channels, 2 * channels, 1, 1],
                Init::HeNormal { fan_in: 2 * channels },
                rng,
            )?,
            bias: ps.add("fusion.concat_conv.bias", &[channels], Init::Constant(0.0), rng)?,
        })
    }
}

/// Single-shot fusion used as the control arm.
pub fn baseline_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    f_t: Var,
    f_v: Var,
    strategy: BaselineStrategy,
    concat_params: Option<&ConcatConvParams>,
) -> Result<Var> {
    let c = tape.value(f_t).dims4()?[1];
    check_pair("baseline_fuse", tape, f_t, f_v, c)?;
    match strategy {
        BaselineStrategy::Average => tape.mean_of(&[f_t, f_v]),
        BaselineStrategy::Max => tape.maximum(f_t, f_v),
        BaselineStrategy::ConcatConv => {
            let p = concat_params.ok_or_else(|| {
                Error::Config("concat_conv fusion needs its own 1x1 conv parameters".into())
            })?;
            let w = ps.bind(tape, p.weight);
            let b = ps.bind(tape, p.bias);
            let cat = tape.concat_channels(f_t, f_v)?;
            tape.conv2d(cat, w, Some(b), 1, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, CheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, loops: usize, seed: u64) -> (ParamSet<f64>, CfrBlock<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let block = CfrBlock::new(&mut ps, CfrConfig::new(c, loops), &mut rng).unwrap();
        (ps, block, rng)
    }

    /// Straight-line concat → conv → batch-norm written without the tape.
    #[allow(clippy::too_many_arguments)]
    fn reference_fuse(
        ft: &Tensor<f64>,
        fv: &Tensor<f64>,
        w: &Tensor<f64>,
        gamma: &[f64],
        beta: &[f64],
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Tensor<f64> {
        let [n, c, h, wd] = ft.dims4().unwrap();
        let mut out = Tensor::zeros(&[n, c, h, wd]);
        for b in 0..n {
            for co in 0..c {
                for y in 0..h {
                    for x in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..2 * c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let v = if ci < c {
                                        ft.at4(b, ci, iy as usize, ix as usize)
                                    } else {
                                        fv.at4(b, ci - c, iy as usize, ix as usize)
                                    };
                                    acc += v * w.at4(co, ci, ky, kx);
                                }
                            }
                        }
                        let norm = (acc - mean[co]) / (var[co] + eps).sqrt();
                        out.data_mut()[((b * c + co) * h + y) * wd + x] = gamma[co] * norm + beta[co];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn fuse_step_matches_reference_pipeline() {
        let (mut ps, mut block, mut rng) = setup(3, 1, 7);
        let ft = Tensor::<f64>::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        let fv = Tensor::<f64>::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        let gamma = vec![0.7, 1.3, 0.9];
        let beta = vec![0.1, -0.2, 0.3];
        ps.get_mut(block.params.bn_gamma).value.data_mut().copy_from_slice(&gamma);
        ps.get_mut(block.params.bn_beta).value.data_mut().copy_from_slice(&beta);
        block.params.bn_stats[0] = BnStats {
            running_mean: vec![0.2, -0.1, 0.05],
            running_var: vec![1.5, 0.8, 2.0],
        };
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(ft.clone(), false), tape.leaf(fv.clone(), false));
        let ff = block.fuse_step(&mut tape, &ps, a, b, 0, Mode::Eval).unwrap();
        let expected = reference_fuse(
            &ft,
            &fv,
            &ps.get(block.params.fuse_weight).value,
            &gamma,
            &beta,
            &[0.2, -0.1, 0.05],
            &[1.5, 0.8, 2.0],
            block.config.bn.eps,
        );
        assert_eq!(tape.value(ff).shape(), ft.shape());
        assert!(tape.value(ff).max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn zero_kernel_gives_zero_fusion() {
        let (mut ps, mut block, mut rng) = setup(2, 1, 1);
        ps.get_mut(block.params.fuse_weight).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng), false);
        let b = tape.leaf(Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng), false);
        for mode in [Mode::Train, Mode::Eval] {
            let ff = block.fuse_step(&mut tape, &ps, a, b, 0, mode).unwrap();
            assert!(tape.value(ff).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (ps, mut block, _) = setup(2, 1, 1);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        assert!(block.fuse_step(&mut tape, &ps, a, b, 0, Mode::Eval).is_err());
        assert!(block.predict_masks(&mut tape, &ps, a, b).is_err());
    }

    #[test]
    fn refine_identity_and_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let prev = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng).map(f64::abs);
        let p = tape.leaf(prev.clone(), false);
        let z = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        let r = CfrBlock::refine_step(&mut tape, p, z).unwrap();
        assert_eq!(tape.value(r), &prev);
        let neg = tape.leaf(prev.map(|v| -v), false);
        let r = CfrBlock::refine_step(&mut tape, p, neg).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let proj = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let r = finite_diff_check("refine_step", &[a, b], CheckOptions::default(), |t, v| {
            let y = CfrBlock::refine_step(t, v[0], v[1])?;
            t.dot(y, proj.data())
        });
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn mask_heads() {
        let (mut ps, block, mut rng) = setup(3, 1, 4);
        let ft = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let fv = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(ft.clone(), false), tape.leaf(fv.clone(), false));
        let (mt, mv) = block.predict_masks(&mut tape, &ps, a, b).unwrap();
        assert_eq!(tape.value(mt).shape(), &[2, 1, 4, 5]);
        // direct dot-product oracle
        let w = ps.get(block.params.seg_v_weight).value.data().to_vec();
        let bias = ps.get(block.params.seg_v_bias).value.data()[0];
        for n in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let e: f64 = (0..3).map(|c| w[c] * fv.at4(n, c, y, x)).sum::<f64>() + bias;
                    assert!((tape.value(mv).at4(n, 0, y, x) - e).abs() < 1e-6);
                }
            }
        }
        // zero weights, bias b → constant logit b
        ps.get_mut(block.params.seg_t_weight).value.data_mut().fill(0.0);
        ps.get_mut(block.params.seg_t_bias).value.data_mut()[0] = -1.25;
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(ft, false), tape.leaf(fv, false));
        let (mt, _) = block.predict_masks(&mut tape, &ps, a, b).unwrap();
        assert!(tape.value(mt).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn cycle_structure_and_replay() {
        let (ps, mut block, mut rng) = setup(2, 3, 5);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng), false);
        let b = tape.leaf(Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng), false);
        let trace = block.run_cycle(&mut tape, &ps, a, b, Mode::Train).unwrap();
        assert_eq!(trace.loops(), 3);
        for list in [&trace.f_t, &trace.f_v, &trace.f_f, &trace.mask_logits_t, &trace.mask_logits_v] {
            assert_eq!(list.len(), 3);
        }
        // f_t[2] == relu(f_t[1] + f_f[2]) recomputed outside the tape
        let (prev, ff, cur) = (
            tape.value(trace.f_t[1]),
            tape.value(trace.f_f[2]),
            tape.value(trace.f_t[2]),
        );
        for i in 0..cur.len() {
            let e = (prev.data()[i] + ff.data()[i]).max(0.0);
            assert_eq!(cur.data()[i], e);
        }
        for v in trace.f_t.iter().chain(&trace.mask_logits_v) {
            assert!(tape.value(*v).all_finite());
        }

        let (ps1, mut one, _) = setup(2, 1, 5);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
        let t1 = one.run_cycle(&mut tape, &ps1, a, a, Mode::Eval).unwrap();
        assert_eq!(t1.loops(), 1);
    }

    #[test]
    fn zero_loops_is_a_contract_violation() {
        let (ps, mut block, _) = setup(2, 0, 5);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
        assert!(matches!(
            block.run_cycle(&mut tape, &ps, a, a, Mode::Eval),
            Err(Error::Contract { op: "run_cycle", .. })
        ));
        assert!(final_fusion(&mut tape, &CfrTrace::default()).is_err());
    }

    #[test]
    fn loops_out_of_range_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f32>::new();
        assert!(CfrBlock::new(&mut ps, CfrConfig::new(4, MAX_LOOPS + 1), &mut rng).is_err());
    }

    #[test]
    fn parameter_count_independent_of_loops() {
        let counts: Vec<usize> = (1..=4)
            .map(|i| {
                let (ps, block, _) = setup(8, i, 0);
                assert_eq!(block.params.parameter_count(&ps), ps.scalar_count());
                ps.scalar_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));
        // 8*16*9 + 8 + 8 + 2*(8 + 1)
        assert_eq!(counts[0], 1152 + 16 + 18);
    }

    #[test]
    fn final_fusion_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let y = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let (a, b) = (tape.leaf(x.clone(), false), tape.leaf(y.clone(), false));
        let trace = CfrTrace {
            f_t: vec![a],
            f_v: vec![b],
            ..Default::default()
        };
        let f = final_fusion(&mut tape, &trace).unwrap();
        for i in 0..x.len() {
            assert!((tape.value(f).data()[i] - (x.data()[i] + y.data()[i]) / 2.0).abs() < 1e-15);
        }
        let same = CfrTrace {
            f_t: vec![a, a],
            f_v: vec![a, a],
            ..Default::default()
        };
        let f = final_fusion(&mut tape, &same).unwrap();
        assert!(tape.value(f).max_abs_diff(&x) < 1e-15);
        let swapped = CfrTrace {
            f_t: trace.f_v.clone(),
            f_v: trace.f_t.clone(),
            ..Default::default()
        };
        let f1 = final_fusion(&mut tape, &trace).unwrap();
        let f2 = final_fusion(&mut tape, &swapped).unwrap();
        assert!(tape.value(f1).max_abs_diff(tape.value(f2)) < 1e-15);
    }

    #[test]
    fn eval_prefix_property() {
        for shared in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut ps = ParamSet::<f64>::new();
            let mut cfg = CfrConfig::new(2, 4);
            cfg.shared_bn_stats = shared;
            let mut block = CfrBlock::new(&mut ps, cfg, &mut rng).unwrap();
            for s in block.params.bn_stats.iter_mut() {
                s.running_mean = vec![0.1, -0.2];
                s.running_var = vec![0.9, 1.4];
            }
            let ft = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let fv = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (a, b) = (tape.leaf(ft.clone(), false), tape.leaf(fv.clone(), false));
            let long = block.run_cycle(&mut tape, &ps, a, b, Mode::Eval).unwrap();
            for k in 1..=4 {
                let mut short = block.clone();
                short.config.loops = k;
                let t = short.run_cycle(&mut tape, &ps, a, b, Mode::Eval).unwrap();
                let pre = long.truncated(k);
                for (x, y) in pre.f_t.iter().chain(&pre.mask_logits_v).zip(t.f_t.iter().chain(&t.mask_logits_v)) {
                    assert_eq!(tape.value(*x), tape.value(*y));
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradient() {
        use crate::tensor::gradcheck::finite_diff_check_model;
        for shared in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut ps = ParamSet::<f64>::new();
            let mut cfg = CfrConfig::new(2, 3);
            cfg.shared_bn_stats = shared;
            let block = CfrBlock::new(&mut ps, cfg, &mut rng).unwrap();
            let ft = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let fv = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let proj = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
            let targets: Vec<f64> = (0..16).map(|i| ((i / 3) % 2) as f64).collect();
            let r = finite_diff_check_model("cfr_cycle", &ps, &[ft, fv], CheckOptions::default(), |t, ps, v| {
                let mut b = block.clone();
                let trace = b.run_cycle(t, ps, v[0], v[1], Mode::Train)?;
                let fused = final_fusion(t, &trace)?;
                let main = t.dot(fused, proj.data())?;
                let mut seg = Vec::new();
                for (&mt, &mv) in trace.mask_logits_t.iter().zip(&trace.mask_logits_v) {
                    seg.push(t.sigmoid_bce(mt, &targets)?);
                    seg.push(t.sigmoid_bce(mv, &targets)?);
                }
                let seg = t.mean_of(&seg)?;
                t.add(main, seg)
            });
            assert!(r.passed, "{r:?}");
            assert!(r.coords_checked > 32 + 100);
        }
    }

    #[test]
    fn baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::<f64>::new();
        let cc = ConcatConvParams::new(&mut ps, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let a = tape.leaf(x.clone(), false);
        let avg = baseline_fuse(&mut tape, &ps, a, a, BaselineStrategy::Average, None).unwrap();
        assert_eq!(tape.value(avg), &x);
        let p = tape.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, -2.0]).unwrap(), false);
        let q = tape.leaf(Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 5.0]).unwrap(), false);
        let mx = baseline_fuse(&mut tape, &ps, p, q, BaselineStrategy::Max, None).unwrap();
        assert_eq!(tape.value(mx).data(), &[1.0, 5.0]);
        // kernel selecting the first C channels returns f_t
        let w = &mut ps.get_mut(cc.weight).value;
        w.data_mut().fill(0.0);
        for c in 0..2 {
            w.data_mut()[c * 4 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let (a, b) = (tape.leaf(x.clone(), false), tape.leaf(x.map(|v| v * 3.0 + 1.0), false));
        let f = baseline_fuse(&mut tape, &ps, a, b, BaselineStrategy::ConcatConv, Some(&cc)).unwrap();
        assert_eq!(tape.value(f), &x);
        assert!(baseline_fuse(&mut tape, &ps, a, b, BaselineStrategy::ConcatConv, None).is_err());
        assert!("median".parse::<BaselineStrategy>().is_err());
        assert_eq!("max".parse::<BaselineStrategy>().unwrap(), BaselineStrategy::Max);
    }
}
