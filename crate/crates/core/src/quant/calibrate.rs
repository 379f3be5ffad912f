//! Step-size calibration by layerwise quantization-error minimization.
//!
//! The step is picked from a grid of 100 candidates, multipliers
//! 0.2 + 0.01k (k = 0..99) of the naive step (max − min)/(p − n), so the
//! naive candidate itself (multiplier 1.0) is always in the grid. The
//! zero-point follows z = −round(min/s), clamped into [n, p].

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::nnkit::model::{ForwardPolicy, Mode, RunCfg};
use crate::nnkit::tape::{Tape, Val};
use crate::nnkit::tensor::Tensor;
use crate::quant::{QuantParam, QuantizedModel, Role, Stage};

const GRID_POINTS: usize = 100;

fn grid_multiplier(k: usize) -> f32 {
    // exact at k = 80 so the naive candidate (multiplier 1.0) is always in
    // the grid
    (20 + k) as f32 / 100.0
}

/// Quantization MSE of `values` under (s, z), in f64.
fn grid_error(values: &[f32], step: f32, zero: i32, qmin: i32, qmax: i32) -> f64 {
    let (zero, qmin, qmax) = (zero as f32, qmin as f32, qmax as f32);
    let mut err = 0.0f64;
    for &w in values {
        let q = ((w / step).round() + zero).clamp(qmin, qmax);
        let deq = step * (q - zero);
        err += ((w - deq) as f64).powi(2);
    }
    err / values.len() as f64
}

fn zero_for(step: f32, min: f32, qmin: i32, qmax: i32, pin_to_min: bool) -> i32 {
    if pin_to_min {
        return qmin;
    }
    ((-min / step).round() as i32).clamp(qmin, qmax)
}

/// Fit (s, z) minimizing the quantization MSE of `values` over the grid.
/// Returns the parameter and the achieved error. All-zero input falls back
/// to s = 1/(p − n) with zero error.
fn fit_step(
    values: &[f32],
    bits: u8,
    role: Role,
    pin_zero_to_min: bool,
) -> Result<(QuantParam, f64)> {
    let (qmin, qmax) = QuantParam::bounds(bits)?;
    if values.is_empty() {
        return Err(Error::contract("step calibration on empty data"));
    }
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let levels = (qmax - qmin) as f32;
    if min == 0.0 && max == 0.0 {
        return Ok((QuantParam::new(bits, 1.0 / levels, 0, role)?, 0.0));
    }
    let range = max - min;
    let naive = if range > 0.0 {
        range / levels
    } else {
        // constant non-zero input: one exact level suffices
        min.abs() / qmax as f32
    };
    let mut best: Option<(f32, i32, f64)> = None;
    for k in 0..GRID_POINTS {
        let step = naive * grid_multiplier(k);
        if !(step > 0.0) {
            continue;
        }
        let zero = zero_for(step, min, qmin, qmax, pin_zero_to_min);
        let err = grid_error(values, step, zero, qmin, qmax);
        if best.map(|(_, _, b)| err < b).unwrap_or(true) {
            best = Some((step, zero, err));
        }
    }
    let (step, zero, err) =
        best.ok_or_else(|| Error::QuantParam("empty calibration grid".into()))?;
    Ok((QuantParam::new(bits, step, zero, role)?, err))
}

/// Grid-calibrate the step for one weight tensor.
pub fn calibrate_step(w: &Tensor, bits: u8) -> Result<(QuantParam, f64)> {
    fit_step(w.data(), bits, Role::Weight, false)
}

/// Calibrate every conv/linear weight tensor of the model.
pub fn calibrate_weights(qm: &mut QuantizedModel) -> Result<()> {
    let indices = qm.model.weight_param_indices();
    let mut wq = Vec::with_capacity(indices.len());
    for &pidx in &indices {
        let (param, _) = calibrate_step(&qm.model.params[pidx].tensor, qm.wbits)?;
        wq.push(param);
    }
    qm.wq = wq;
    qm.stage = Stage::Calibrated;
    Ok(())
}

/// Forward policy that records a deterministic subsample of the values
/// flowing through each activation site.
struct ActCapture {
    sites: RefCell<Vec<Vec<f32>>>,
    per_batch_cap: usize,
}

impl ActCapture {
    fn new(num_sites: usize) -> Self {
        ActCapture {
            sites: RefCell::new(vec![Vec::new(); num_sites]),
            per_batch_cap: 32_768,
        }
    }
}

impl ForwardPolicy for ActCapture {
    fn activation(&self, tape: &mut Tape, site: usize, x: Val) -> Result<Val> {
        let data = tape.value(x).data();
        let stride = data.len().div_ceil(self.per_batch_cap).max(1);
        let mut sink = self.sites.borrow_mut();
        sink[site].extend(data.iter().step_by(stride));
        Ok(x)
    }
}

/// Fit activation steps from the float model's activations on a calibration
/// set. Post-ReLU sites get their zero-point pinned to the lower bound. A
/// site that never activates falls back to a step derived from the range of
/// the weights feeding it; the returned strings are the emitted warnings.
pub fn calibrate_activations(qm: &mut QuantizedModel, calib: &Tensor) -> Result<Vec<String>> {
    if calib.shape()[0] == 0 {
        return Err(Error::contract("empty calibration set"));
    }
    let capture = ActCapture::new(qm.model.num_act_sites());
    let n = calib.shape()[0];
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        let slice = calib.slice_batch(start, len)?;
        let mut tape = Tape::new();
        qm.model.run(
            &mut tape,
            &slice,
            &RunCfg {
                mode: Mode::Eval,
                ..RunCfg::eval(&capture)
            },
        )?;
        start += len;
    }
    let recorded = capture.sites.into_inner();
    let mut warnings = Vec::new();
    let mut aq = Vec::with_capacity(recorded.len());
    for (site, values) in recorded.iter().enumerate() {
        let dead = values.iter().all(|&v| v == 0.0);
        if dead {
            let widx = fallback_weight_for_site(qm, site);
            let w = qm.weight_tensor(widx);
            let min = w.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let max = w.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let (qmin, qmax) = QuantParam::bounds(qm.abits)?;
            let step = ((max - min) / (qmax - qmin) as f32).max(1e-6);
            let warning = format!(
                "activation site {site} saw no nonzero values; falling back to weight-range step {step:e}"
            );
            eprintln!("warning: {warning}");
            warnings.push(warning);
            aq.push(QuantParam::new(qm.abits, step, qmin, Role::Activation)?);
            continue;
        }
        let pin = qm.model.act_site_non_negative(site);
        let (param, _) = fit_step(values, qm.abits, Role::Activation, pin)?;
        aq.push(param);
    }
    qm.aq = aq;
    Ok(warnings)
}

/// Weight tensor whose range stands in for a dead activation site.
fn fallback_weight_for_site(qm: &QuantizedModel, site: usize) -> usize {
    use crate::nnkit::model::Arch;
    match qm.model.arch {
        // sites 0..3 are relu outputs of conv1..4; site 4 is the pooled
        // feature fed by conv4
        Arch::TinyCnn => site.min(3),
        Arch::TinyVit => {
            let blocks = (qm.model.num_act_sites() - 1) / 2;
            if site == 2 * blocks {
                1 + 6 * blocks // head weight
            } else {
                let blk = site / 2;
                let base = 1 + 6 * blk;
                if site % 2 == 0 {
                    base + 2 // value projection feeds the softmax-value product
                } else {
                    base + 4 // mlp.w1 feeds the GELU
                }
            }
        }
    }
}
