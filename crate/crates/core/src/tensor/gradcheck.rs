//! Central finite-difference verification of tape gradients, in `f64`.

use super::tape::{Fault, Tape, Var};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Finite-difference step, within `[1e-6, 1e-3]`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates probed per input; larger inputs are sampled evenly.
    pub max_coords: usize,
    pub fault: Option<Fault>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: 64,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub passed: bool,
    /// Set when the check could not run (e.g. a non-finite gradient).
    pub failure: Option<String>,
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|i| i * len / max).collect();
    idx.push(len - 1);
    idx.dedup();
    idx
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the tape's gradient of `build`'s scalar output against central
/// differences for every input tensor.
pub fn finite_diff_check<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    opts: CheckOptions,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    match run_check(inputs, &opts, &build) {
        Ok((max_rel_err, coords_checked)) => GradCheckReport {
            op: op.to_string(),
            max_rel_err,
            coords_checked,
            passed: max_rel_err < opts.tol,
            failure: None,
        },
        Err(e) => GradCheckReport {
            op: op.to_string(),
            max_rel_err: f64::INFINITY,
            coords_checked: 0,
            passed: false,
            failure: Some(e.to_string()),
        },
    }
}

fn new_tape(opts: &CheckOptions) -> Tape<f64> {
    match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    }
}

fn eval_loss<F>(inputs: &[Tensor<f64>], opts: &CheckOptions, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = new_tape(opts);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let loss = build(&mut tape, &vars)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss from {}", tape.op_name(loss))));
    }
    Ok(v)
}

fn run_check<F>(inputs: &[Tensor<f64>], opts: &CheckOptions, build: &F) -> Result<(f64, usize)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.step) {
        return Err(Error::contract("finite_diff_check", "step must lie in [1e-6, 1e-3]"));
    }
    let mut tape = new_tape(opts);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in probe_indices(inputs[i].len(), opts.max_coords) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let up = eval_loss(&work, opts, build)?;
            work[i].data_mut()[j] = orig - opts.step;
            let down = eval_loss(&work, opts, build)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[j], numeric, opts.floor));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Like [`finite_diff_check`], but also checks every parameter in `params`
/// that the built graph binds.
pub fn finite_diff_check_model<F>(
    op: &str,
    params: &ParamSet<f64>,
    inputs: &[Tensor<f64>],
    opts: CheckOptions,
    build: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>, &[Var]) -> Result<Var>,
{
    let wrapped = |ps: &ParamSet<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        eval_loss(ins, &opts, &|t: &mut Tape<f64>, v: &[Var]| build(t, ps, v))
    };
    let result = (|| -> Result<(f64, usize)> {
        let (mut worst, mut count) = run_check(inputs, &opts, &|t: &mut Tape<f64>, v: &[Var]| {
            build(t, params, v)
        })?;
        let mut tape = new_tape(&opts);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, params, &vars)?;
        let grads = tape.backward(loss)?;
        let mut bound: Vec<(usize, Var)> = tape.param_vars().collect();
        bound.sort_by_key(|(k, _)| *k);
        let mut work = params.clone();
        for (key, var) in bound {
            let analytic = grads.get(var).map(|g| g.to_vec());
            let len = params.iter().nth(key).map(|p| p.value.len()).unwrap_or(0);
            for j in probe_indices(len, opts.max_coords) {
                let orig = params.iter().nth(key).expect("bound param").value.data()[j];
                let set = |w: &mut ParamSet<f64>, v: f64| {
                    w.iter_mut().nth(key).expect("bound param").value.data_mut()[j] = v;
                };
                set(&mut work, orig + opts.step);
                let up = wrapped(&work, inputs)?;
                set(&mut work, orig - opts.step);
                let down = wrapped(&work, inputs)?;
                set(&mut work, orig);
                let numeric = (up - down) / (2.0 * opts.step);
                let a = analytic.as_ref().map_or(0.0, |g| g[j]);
                worst = worst.max(relative_error(a, numeric, opts.floor));
                count += 1;
            }
        }
        Ok((worst, count))
    })();
    match result {
        Ok((max_rel_err, coords_checked)) => GradCheckReport {
            op: op.to_string(),
            max_rel_err,
            coords_checked,
            passed: max_rel_err < opts.tol,
            failure: None,
        },
        Err(e) => GradCheckReport {
            op: op.to_string(),
            max_rel_err: f64::INFINITY,
            coords_checked: 0,
            passed: false,
            failure: Some(e.to_string()),
        },
    }
}
