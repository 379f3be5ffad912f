//! Block-wise tuning of the weight rounding.
//!
//! Quantization of a reconstructed tensor becomes floor(w/s) + sign(v): the
//! binary up/down decision is relaxed through a rectified sigmoid h(v),
//! optimized to minimize the squared error between the float block output
//! and the quantized block output on calibration data, with an annealed
//! regularizer pushing h(v) to {0, 1}. Inputs to each block come from the
//! already-quantized prefix of the network; targets come from the float
//! model. The result is never worse than nearest rounding: if the learned
//! rounding loses to the nearest-rounding initialization on the calibration
//! set, it is reverted.

use crate::error::{Error, Result};
use crate::nnkit::model::{ForwardPolicy, Mode, RunCfg, TapPoint};
use crate::nnkit::rng::Rng;
use crate::nnkit::tape::{Tape, Val, WeightRounding};
use crate::nnkit::tensor::Tensor;
use crate::quant::{nearest_rounding_v, QuantEvalPolicy, QuantParam, QuantizedModel, Stage};

#[derive(Debug, Clone)]
pub struct ReconCfg {
    pub iters: usize,
    pub batch: usize,
    pub lr: f32,
    /// Relative weight of the rounding regularizer against the block MSE.
    pub reg_weight: f32,
    /// Fraction of iterations before the regularizer switches on.
    pub warmup: f32,
    pub seed: u64,
}

impl Default for ReconCfg {
    fn default() -> Self {
        ReconCfg {
            iters: 300,
            batch: 32,
            lr: 0.01,
            reg_weight: 0.01,
            warmup: 0.2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReconStats {
    pub nearest_mse: f64,
    pub learned_mse: f64,
    /// MSE of the rounding actually stored (learned, or nearest if reverted).
    pub final_mse: f64,
    pub reverted: bool,
}

/// Policy used inside a block under reconstruction: the block's own weights
/// quantize through live rounding variables (soft during optimization, hard
/// for scoring); any other weight and every activation site behaves exactly
/// like quantized inference.
struct RoundingPolicy<'a> {
    qm: &'a QuantizedModel,
    block_widx: &'a [usize],
    v_vals: Vec<Val>,
    soft: bool,
}

impl ForwardPolicy for RoundingPolicy<'_> {
    fn weight(&self, tape: &mut Tape, widx: usize, w: Val) -> Result<Val> {
        match self.block_widx.iter().position(|&i| i == widx) {
            Some(pos) => tape.fq_weight(
                w,
                Some(self.v_vals[pos]),
                None,
                self.qm.wq[widx].fq_meta(),
                WeightRounding::FloorSign,
                self.soft,
            ),
            None => {
                let (_, deq) = crate::quant::quantize(tape.value(w), &self.qm.wq[widx])?;
                Ok(tape.constant(deq))
            }
        }
    }

    fn activation(&self, tape: &mut Tape, site: usize, x: Val) -> Result<Val> {
        let Some(q) = self.qm.aq.get(site) else {
            return Ok(x);
        };
        let s = tape.constant(Tensor::scalar(q.step));
        tape.fq_act(x, s, q.zero as f32, q.qmin as f32, q.qmax as f32, false)
    }
}

/// Capture (quantized-prefix input, float output) pairs for one block over
/// the whole calibration set.
fn capture_block_data(
    qm: &QuantizedModel,
    calib: &Tensor,
    block: usize,
) -> Result<(Tensor, Tensor)> {
    let n = calib.shape()[0];
    let eval_policy = QuantEvalPolicy::new(qm)?;
    let float_policy = crate::nnkit::model::FloatPolicy;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut start = 0;
    while start < n {
        let len = 64.min(n - start);
        let slice = calib.slice_batch(start, len)?;
        let mut tape = Tape::new();
        let mut cfg = RunCfg::eval(&eval_policy);
        cfg.tap = Some(TapPoint::BlockInput(block));
        let out = qm.model.run(&mut tape, &slice, &cfg)?;
        inputs.push(
            out.tap.ok_or_else(|| {
                Error::contract(format!("block {block} input tap produced nothing"))
            })?,
        );
        let mut tape = Tape::new();
        let mut cfg = RunCfg {
            mode: Mode::Eval,
            ..RunCfg::eval(&float_policy)
        };
        cfg.tap = Some(TapPoint::BlockOutput(block));
        let out = qm.model.run(&mut tape, &slice, &cfg)?;
        targets.push(out.tap.ok_or_else(|| {
            Error::contract(format!("block {block} output tap produced nothing"))
        })?);
        start += len;
    }
    Ok((
        Tensor::concat_batch(&inputs)?,
        Tensor::concat_batch(&targets)?,
    ))
}

/// Generic rounding optimizer over a block forward. `forward` receives the
/// input value, one rounding-variable value per weight, and the soft flag.
pub(crate) fn optimize_rounding<F>(
    v_init: Vec<Tensor>,
    inputs: &Tensor,
    targets: &Tensor,
    forward: F,
    cfg: &ReconCfg,
) -> Result<(Vec<Tensor>, ReconStats)>
where
    F: Fn(&mut Tape, Val, &[Val], bool) -> Result<Val>,
{
    let n = inputs.shape()[0];
    if targets.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "optimize_rounding",
            lhs: inputs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let hard_mse = |vs: &[Tensor]| -> Result<f64> {
        let mut err = 0.0f64;
        let mut count = 0usize;
        let mut start = 0;
        while start < n {
            let len = 64.min(n - start);
            let xb = inputs.slice_batch(start, len)?;
            let tb = targets.slice_batch(start, len)?;
            let mut tape = Tape::new();
            let x = tape.constant(xb);
            let v_vals: Vec<Val> = vs.iter().map(|v| tape.constant(v.clone())).collect();
            let y = forward(&mut tape, x, &v_vals, false)?;
            for (a, b) in tape.value(y).data().iter().zip(tb.data()) {
                err += ((a - b) as f64).powi(2);
            }
            count += tb.numel();
            start += len;
        }
        Ok(err / count as f64)
    };

    let nearest_mse = hard_mse(&v_init)?;
    if cfg.iters == 0 {
        return Ok((
            v_init,
            ReconStats {
                nearest_mse,
                learned_mse: nearest_mse,
                final_mse: nearest_mse,
                reverted: false,
            },
        ));
    }

    let mut rng = Rng::new(cfg.seed).split(0x726f756e64); // "round"
    let mut v_cur = v_init.clone();
    let mut adam_m: Vec<Tensor> = v_cur.iter().map(|v| Tensor::zeros(v.shape())).collect();
    let mut adam_s: Vec<Tensor> = v_cur.iter().map(|v| Tensor::zeros(v.shape())).collect();
    let total_weights: usize = v_cur.iter().map(|v| v.numel()).sum();
    let reg_scale = cfg.reg_weight * nearest_mse.max(1e-10) as f32 / total_weights as f32;
    let warm_iters = (cfg.iters as f32 * cfg.warmup) as usize;
    let batch = cfg.batch.max(1).min(n);
    for it in 0..cfg.iters {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
        let xb = inputs.gather_batch(&idx)?;
        let tb = targets.gather_batch(&idx)?;
        let mut tape = Tape::new();
        let x = tape.constant(xb);
        let tgt = tape.constant(tb);
        let v_vals: Vec<Val> = v_cur.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let y = forward(&mut tape, x, &v_vals, true)?;
        let mut loss = tape.mse(y, tgt)?;
        if it >= warm_iters {
            let progress = (it - warm_iters) as f32 / (cfg.iters - warm_iters).max(1) as f32;
            let beta = 20.0 - 18.0 * progress;
            for &vv in &v_vals {
                let reg = tape.round_reg(vv, beta)?;
                let reg = tape.scale(reg, reg_scale)?;
                loss = tape.add(loss, reg)?;
            }
        }
        tape.backward(loss)?;
        let t = (it + 1) as f32;
        let bc1 = 1.0 - 0.9f32.powf(t);
        let bc2 = 1.0 - 0.999f32.powf(t);
        for (k, v) in v_cur.iter_mut().enumerate() {
            let Some(grad) = tape.grad(v_vals[k]) else {
                continue;
            };
            let m = adam_m[k].data_mut();
            let s = adam_s[k].data_mut();
            for ((vi, &gi), (mi, si)) in v
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(s.iter_mut()))
            {
                *mi = 0.9 * *mi + 0.1 * gi;
                *si = 0.999 * *si + 0.001 * gi * gi;
                let mhat = *mi / bc1;
                let shat = *si / bc2;
                *vi -= cfg.lr * mhat / (shat.sqrt() + 1e-8);
            }
        }
    }
    let learned_mse = hard_mse(&v_cur)?;
    let reverted = learned_mse > nearest_mse;
    let (v_final, final_mse) = if reverted {
        (v_init, nearest_mse)
    } else {
        (v_cur, learned_mse)
    };
    Ok((
        v_final,
        ReconStats {
            nearest_mse,
            learned_mse,
            final_mse,
            reverted,
        },
    ))
}

/// Reconstruct the rounding of one block of the quantized model.
pub fn reconstruct_rounding(
    qm: &mut QuantizedModel,
    calib: &Tensor,
    cfg: &ReconCfg,
    block: usize,
) -> Result<ReconStats> {
    if qm.wq.is_empty() {
        return Err(Error::Stage(
            "weights must be calibrated before reconstruction".into(),
        ));
    }
    if block >= qm.model.num_blocks() {
        return Err(Error::contract(format!(
            "block {block} out of range ({} blocks)",
            qm.model.num_blocks()
        )));
    }
    let (inputs, targets) = capture_block_data(qm, calib, block)?;
    let widxs = qm.model.block_weight_indices(block);
    let v_init: Vec<Tensor> = widxs
        .iter()
        .map(|&wi| nearest_rounding_v(qm.weight_tensor(wi), &qm.wq[wi]))
        .collect();
    let block_cfg = ReconCfg {
        seed: cfg.seed ^ (block as u64).wrapping_mul(0x9E37),
        ..cfg.clone()
    };
    let (v_final, stats) = {
        let qm_ref: &QuantizedModel = qm;
        let widxs_ref = &widxs;
        optimize_rounding(
            v_init,
            &inputs,
            &targets,
            |tape, x, v_vals, soft| {
                let policy = RoundingPolicy {
                    qm: qm_ref,
                    block_widx: widxs_ref,
                    v_vals: v_vals.to_vec(),
                    soft,
                };
                qm_ref.model.run_block(tape, block, x, &policy)
            },
            &block_cfg,
        )?
    };
    for (&wi, v) in widxs.iter().zip(v_final) {
        qm.wq[wi].v = Some(v);
        qm.wq[wi].stage = Stage::Reconstructed;
    }
    Ok(stats)
}

/// Reconstruct every block in forward order and mark the model
/// reconstructed.
pub fn reconstruct_all(
    qm: &mut QuantizedModel,
    calib: &Tensor,
    cfg: &ReconCfg,
) -> Result<Vec<ReconStats>> {
    let mut stats = Vec::new();
    for block in 0..qm.model.num_blocks() {
        stats.push(reconstruct_rounding(qm, calib, cfg, block)?);
    }
    qm.stage = Stage::Reconstructed;
    Ok(stats)
}

/// Standalone rounding optimization of a single linear layer `y = x·wᵀ`.
pub fn optimize_rounding_linear(
    w: &Tensor,
    q: &QuantParam,
    x: &Tensor,
    target: &Tensor,
    cfg: &ReconCfg,
) -> Result<(Tensor, ReconStats)> {
    let v_init = vec![nearest_rounding_v(w, q)];
    let meta = q.fq_meta();
    let (mut v, stats) = optimize_rounding(
        v_init,
        x,
        target,
        |tape, xv, v_vals, soft| {
            let wl = tape.leaf(w.clone(), false);
            let wq = tape.fq_weight(
                wl,
                Some(v_vals[0]),
                None,
                meta,
                WeightRounding::FloorSign,
                soft,
            )?;
            tape.matmul(xv, wq, true)
        },
        cfg,
    )?;
    Ok((v.remove(0), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::rng::Rng;
    use crate::quant::{quantize, Role};

    fn linear_out(x: &Tensor, w: &Tensor) -> Tensor {
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        let mut out = vec![0.0f32; n * o];
        for r in 0..n {
            for c in 0..o {
                let mut s = 0.0;
                for k in 0..i {
                    s += x.data()[r * i + k] * w.data()[c * i + k];
                }
                out[r * o + c] = s;
            }
        }
        Tensor::new(vec![n, o], out).unwrap()
    }

    #[test]
    fn lattice_weights_stay_lossless() {
        // weights already exact multiples of s: learned rounding equals
        // nearest rounding with zero block error
        let w = Tensor::from_vec(&[1, 4], vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        let (q, _) = crate::quant::calibrate_step(&w, 2).unwrap();
        let mut rng = Rng::new(2);
        let mut x = Tensor::zeros(&[32, 4]);
        rng.fill_uniform(x.data_mut(), -1.0, 1.0);
        let target = linear_out(&x, &w);
        let cfg = ReconCfg {
            iters: 150,
            seed: 3,
            ..ReconCfg::default()
        };
        let (v, stats) = optimize_rounding_linear(&w, &q, &x, &target, &cfg).unwrap();
        assert!(stats.final_mse < 1e-10, "{stats:?}");
        let mut q2 = q.clone();
        q2.v = Some(v);
        q2.stage = Stage::Reconstructed;
        let (_, deq) = quantize(&w, &q2).unwrap();
        assert_eq!(deq.data(), w.data());
    }

    #[test]
    fn zero_iters_reproduces_nearest_rounding() {
        let mut rng = Rng::new(5);
        let mut w = Tensor::zeros(&[2, 4]);
        rng.fill_uniform(w.data_mut(), -1.0, 1.0);
        let (q, _) = crate::quant::calibrate_step(&w, 2).unwrap();
        let mut x = Tensor::zeros(&[16, 4]);
        rng.fill_uniform(x.data_mut(), -1.0, 1.0);
        let target = linear_out(&x, &w);
        let cfg = ReconCfg {
            iters: 0,
            ..ReconCfg::default()
        };
        let (v, stats) = optimize_rounding_linear(&w, &q, &x, &target, &cfg).unwrap();
        assert_eq!(stats.nearest_mse, stats.final_mse);
        let mut q2 = q.clone();
        q2.v = Some(v);
        q2.stage = Stage::Reconstructed;
        let (ints_nearest, _) = quantize(&w, &q).unwrap();
        let (ints_learned, _) = quantize(&w, &q2).unwrap();
        assert_eq!(ints_nearest, ints_learned);
    }

    #[test]
    fn learned_rounding_never_loses_to_nearest() {
        let mut rng = Rng::new(11);
        for trial in 0..5 {
            let mut w = Tensor::zeros(&[8, 8]);
            rng.fill_uniform(w.data_mut(), -1.2, 1.2);
            let (q, _) = crate::quant::calibrate_step(&w, 2).unwrap();
            let mut x = Tensor::zeros(&[48, 8]);
            rng.fill_uniform(x.data_mut(), -1.0, 1.0);
            let target = linear_out(&x, &w);
            let cfg = ReconCfg {
                iters: 200,
                seed: trial,
                ..ReconCfg::default()
            };
            let (_, stats) = optimize_rounding_linear(&w, &q, &x, &target, &cfg).unwrap();
            assert!(
                stats.final_mse <= stats.nearest_mse + 1e-9,
                "trial {trial}: {stats:?}"
            );
        }
    }

    #[test]
    fn model_block_reconstruction_improves_or_matches() {
        use crate::nnkit::model::{Arch, Model};
        let model = Model::new(Arch::TinyCnn, 21);
        let mut rng = Rng::new(22);
        let mut calib = Tensor::zeros(&[32, 3, 32, 32]);
        rng.fill_uniform(calib.data_mut(), 0.0, 1.0);
        let mut qm = QuantizedModel::calibrate(model, 2, 4).unwrap();
        crate::quant::calibrate_activations(&mut qm, &calib).unwrap();
        let cfg = ReconCfg {
            iters: 60,
            seed: 7,
            ..ReconCfg::default()
        };
        let stats = reconstruct_rounding(&mut qm, &calib, &cfg, 0).unwrap();
        assert!(stats.final_mse <= stats.nearest_mse + 1e-9, "{stats:?}");
        assert!(qm.wq[0].v.is_some());
        assert_eq!(qm.wq[0].stage, Stage::Reconstructed);
    }

    #[test]
    fn unknown_block_is_contract_error() {
        use crate::nnkit::model::{Arch, Model};
        let model = Model::new(Arch::TinyCnn, 2);
        let mut qm = QuantizedModel::calibrate(model, 4, 4).unwrap();
        let calib = Tensor::full(&[2, 3, 32, 32], 0.3);
        let err = reconstruct_rounding(&mut qm, &calib, &ReconCfg::default(), 99);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn two_bit_enumeration_close_to_bruteforce() {
        // 1x4 layer at 2 bits: compare against all 16 rounding configurations
        let mut rng = Rng::new(31);
        let mut ok = 0;
        let trials = 6;
        for trial in 0..trials {
            let mut w = Tensor::zeros(&[1, 4]);
            rng.fill_uniform(w.data_mut(), -1.0, 1.0);
            let (q, _) = crate::quant::calibrate_step(&w, 2).unwrap();
            let mut x = Tensor::zeros(&[32, 4]);
            rng.fill_uniform(x.data_mut(), -1.0, 1.0);
            let target = linear_out(&x, &w);
            let cfg = ReconCfg {
                iters: 400,
                seed: 100 + trial,
                ..ReconCfg::default()
            };
            let (_, stats) = optimize_rounding_linear(&w, &q, &x, &target, &cfg).unwrap();
            let best = brute_force_best(&w, &q, &x, &target);
            if stats.final_mse <= best * 1.05 + 1e-12 {
                ok += 1;
            }
        }
        assert!(
            ok >= trials - 1,
            "only {ok}/{trials} trials near the optimum"
        );
    }

    pub(crate) fn brute_force_best(w: &Tensor, q: &QuantParam, x: &Tensor, target: &Tensor) -> f64 {
        let n = w.numel();
        let mut best = f64::INFINITY;
        for mask in 0..(1usize << n) {
            let v: Vec<f32> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            let mut q2 = QuantParam::new(q.bits, q.step, q.zero, Role::Weight).unwrap();
            q2.v = Some(Tensor::new(w.shape().to_vec(), v).unwrap());
            q2.stage = Stage::Reconstructed;
            let (_, deq) = quantize(w, &q2).unwrap();
            let out = linear_out(x, &deq);
            let mse = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / out.numel() as f64;
            if mse < best {
                best = mse;
            }
        }
        best
    }
}
