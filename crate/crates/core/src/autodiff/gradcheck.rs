//! Finite-difference verification of analytic gradients.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradMode, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default central-difference step, 2⁻¹³ ≈ 1.22e-4. A power of two keeps
/// `(x + h) - (x - h)` exact for most `x`.
pub const DEFAULT_STEP: f64 = 1.0 / 8192.0;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Also check every parameter the builder touches.
    pub check_params: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            step: DEFAULT_STEP,
            coords_per_tensor: 5,
            seed: 0,
            check_params: true,
        }
    }
}

/// Which tensor a probed coordinate belongs to.
#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    Input(usize),
    Param(String),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    pub checked: usize,
    /// Worst coordinate as (tensor, flat index, analytic, numeric).
    pub worst: Option<(Probe, usize, f64, f64)>,
    pub diagnostic: Option<String>,
}

/// Compare analytic gradients of `builder` with central differences.
///
/// The builder's output is contracted with fixed random weights, so it may be of
/// any shape. Each input tensor (and, if requested, each parameter reached by
/// the builder) is probed at `coords_per_tensor` random coordinates.
pub fn grad_check<F>(
    store: &ParamStore,
    builder: F,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new(store, GradMode::ALL);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = builder(&mut tape, &vars)?;
    let out_value = tape.value(out).clone();
    if !out_value.is_finite() {
        return Ok(failure("forward produced non-finite values"));
    }
    let weights: Rc<Vec<f64>> = Rc::new(if out_value.numel() == 1 {
        vec![1.0]
    } else {
        (0..out_value.numel())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    });
    let loss = tape.dot_const(out, weights.clone())?;
    let grads = tape.backward(loss)?;

    let mut targets: Vec<(Probe, Vec<f64>)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        targets.push((Probe::Input(i), g));
    }
    let mut touched: Vec<ParamId> = Vec::new();
    if opts.check_params {
        touched = grads.param_ids().collect();
        touched.sort();
        for &id in &touched {
            targets.push((
                Probe::Param(store.get(id).name.clone()),
                grads.param(id).unwrap().to_vec(),
            ));
        }
    }

    let eval = |ins: &[Tensor], st: &ParamStore| -> Result<Tensor> {
        let mut t = Tape::new(st, GradMode::NONE);
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = builder(&mut t, &vs)?;
        Ok(t.value(o).clone())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        checked: 0,
        worst: None,
        diagnostic: None,
    };
    for (ti, (probe, analytic)) in targets.iter().enumerate() {
        if analytic.iter().any(|v| !v.is_finite()) {
            return Ok(failure(&format!("non-finite analytic gradient for {probe:?}")));
        }
        let len = analytic.len();
        let count = opts.coords_per_tensor.min(len);
        for idx in sample(&mut rng, len, count).into_iter() {
            let (plus, minus, step) = match probe {
                Probe::Input(k) => {
                    let mut hi = inputs.to_vec();
                    let mut lo = inputs.to_vec();
                    let x = inputs[*k].data()[idx];
                    hi[*k].data_mut()[idx] = x + opts.step;
                    lo[*k].data_mut()[idx] = x - opts.step;
                    let step = hi[*k].data()[idx] - lo[*k].data()[idx];
                    (eval(&hi, store)?, eval(&lo, store)?, step)
                }
                Probe::Param(_) => {
                    let id = touched[ti - inputs.len()];
                    let x = store.value(id).data()[idx];
                    let mut hi = store.clone();
                    hi.value_mut(id).data_mut()[idx] = x + opts.step;
                    let mut lo = store.clone();
                    lo.value_mut(id).data_mut()[idx] = x - opts.step;
                    let step = hi.value(id).data()[idx] - lo.value(id).data()[idx];
                    (eval(inputs, &hi)?, eval(inputs, &lo)?, step)
                }
            };
            if !plus.is_finite() || !minus.is_finite() {
                return Ok(failure(&format!("non-finite perturbed output for {probe:?}")));
            }
            let diff: f64 = plus
                .data()
                .iter()
                .zip(minus.data())
                .zip(weights.iter())
                .map(|((p, m), w)| w * (p - m))
                .sum();
            let numeric = diff / step;
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((probe.clone(), idx, a, numeric));
                }
            }
        }
    }
    report.pass = report.max_rel_error < opts.tolerance;
    Ok(report)
}

fn failure(msg: &str) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: f64::INFINITY,
        pass: false,
        checked: 0,
        worst: None,
        diagnostic: Some(msg.to_string()),
    }
}
