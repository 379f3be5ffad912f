//! Uniform quantization, PTQ calibration with learned rounding, and QAT
//! finetuning from the PTQ solution.
//!
//! Integer bounds are unsigned asymmetric: n = 0, p = 2^b − 1, with
//! zero-point z = −round(min(w)/s) clamped into [n, p]. Rounding ties break
//! half-away-from-zero everywhere. After reconstruction the rounding is the
//! frozen floor-plus-sign(v) form; QAT adds the round(u/s) offset with u
//! updated through the straight-through estimator.

pub mod calibrate;
pub mod io;
pub mod qat;
pub mod reconstruct;

use crate::error::{Error, Result};
use crate::nnkit::model::{ForwardPolicy, Model};
use crate::nnkit::tape::{self, FqMeta, Tape, Val, WeightRounding};
use crate::nnkit::tensor::Tensor;
use crate::nnkit::train;

pub use calibrate::{calibrate_activations, calibrate_step, calibrate_weights};
pub use io::{load_quantized, save_quantized};
pub use qat::{qat_finetune, QatCfg, QatLog};
pub use reconstruct::{reconstruct_all, reconstruct_rounding, ReconCfg, ReconStats};

/// Quantization lifecycle of a tensor (and of the whole model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Calibrated = 0,
    Reconstructed = 1,
    QatFinetuned = 2,
}

impl Stage {
    pub fn tag(&self) -> u8 {
        *self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Stage> {
        match tag {
            0 => Ok(Stage::Calibrated),
            1 => Ok(Stage::Reconstructed),
            2 => Ok(Stage::QatFinetuned),
            other => Err(Error::format(format!("unknown stage tag {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Calibrated => "calibrated",
            Stage::Reconstructed => "reconstructed",
            Stage::QatFinetuned => "qat-finetuned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Activation,
}

/// Per-tensor quantization state.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParam {
    pub bits: u8,
    pub step: f32,
    pub zero: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub stage: Stage,
    pub role: Role,
    /// Learned rounding variable; present once rounding was reconstructed.
    pub v: Option<Tensor>,
    /// QAT offset; all-zero immediately after QAT initialization.
    pub u: Option<Tensor>,
}

impl QuantParam {
    pub fn bounds(bits: u8) -> Result<(i32, i32)> {
        if !(2..=8).contains(&bits) {
            return Err(Error::QuantParam(format!("unsupported bit-width {bits}")));
        }
        Ok((0, (1i32 << bits) - 1))
    }

    pub fn new(bits: u8, step: f32, zero: i32, role: Role) -> Result<QuantParam> {
        let (qmin, qmax) = Self::bounds(bits)?;
        if !(step > 0.0) {
            return Err(Error::QuantParam(format!("non-positive step {step}")));
        }
        let zero = zero.clamp(qmin, qmax);
        Ok(QuantParam {
            bits,
            step,
            zero,
            qmin,
            qmax,
            stage: Stage::Calibrated,
            role,
            v: None,
            u: None,
        })
    }

    pub(crate) fn fq_meta(&self) -> FqMeta {
        FqMeta {
            step: self.step,
            zero: self.zero as f32,
            qmin: self.qmin as f32,
            qmax: self.qmax as f32,
        }
    }

    fn rounding_mode(&self) -> WeightRounding {
        match self.stage {
            Stage::Calibrated => WeightRounding::Nearest,
            Stage::Reconstructed => WeightRounding::FloorSign,
            Stage::QatFinetuned => WeightRounding::FloorSignOffset,
        }
    }

    /// Dequantized representable range `[s(n−z), s(p−z)]`.
    pub fn dequant_range(&self) -> (f32, f32) {
        (
            self.step * (self.qmin - self.zero) as f32,
            self.step * (self.qmax - self.zero) as f32,
        )
    }
}

/// Quantize a tensor under `q`, honoring its stage: nearest rounding when
/// calibrated, floor + sign(v) when reconstructed, plus round(u/s) when
/// QAT-finetuned. Returns the integer levels and the dequantized tensor.
pub fn quantize(w: &Tensor, q: &QuantParam) -> Result<(Vec<i32>, Tensor)> {
    if !(q.step > 0.0) {
        return Err(Error::QuantParam(format!("non-positive step {}", q.step)));
    }
    let mode = q.rounding_mode();
    let need_v = mode != WeightRounding::Nearest;
    let need_u = mode == WeightRounding::FloorSignOffset;
    if need_v && q.v.is_none() {
        return Err(Error::QuantParam(
            "stage requires rounding variable v".into(),
        ));
    }
    if need_u && q.u.is_none() {
        return Err(Error::QuantParam("stage requires QAT offset u".into()));
    }
    for (name, t) in [("v", q.v.as_ref()), ("u", q.u.as_ref())] {
        if let Some(t) = t {
            if t.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    op: if name == "v" {
                        "quantize v"
                    } else {
                        "quantize u"
                    },
                    lhs: w.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
    }
    let meta = q.fq_meta();
    let mut ints = Vec::with_capacity(w.numel());
    let mut deq = Vec::with_capacity(w.numel());
    for (i, &wi) in w.data().iter().enumerate() {
        let (level, value) = tape::fq_weight_value(
            wi,
            if need_v {
                Some(q.v.as_ref().unwrap().data()[i])
            } else {
                None
            },
            if need_u {
                Some(q.u.as_ref().unwrap().data()[i])
            } else {
                None
            },
            &meta,
            mode,
            false,
        );
        ints.push(level as i32);
        deq.push(value);
    }
    Ok((ints, Tensor::new(w.shape().to_vec(), deq)?))
}

/// Rounding variable reproducing nearest rounding exactly: h(v) starts at
/// the fractional part of w/s and the sign of v matches the half-away-from-
/// zero tie rule bitwise.
pub fn nearest_rounding_v(w: &Tensor, q: &QuantParam) -> Tensor {
    let mut v = Vec::with_capacity(w.numel());
    for &wi in w.data() {
        let t = wi / q.step;
        let frac = t - t.floor();
        let up = t.round() - t.floor() >= 1.0;
        let mut vi = tape::rect_sigmoid_inverse(frac);
        if up && vi < 0.0 {
            vi = 1e-4;
        } else if !up && vi >= 0.0 {
            vi = -1e-4;
        }
        v.push(vi);
    }
    Tensor::new(w.shape().to_vec(), v).expect("same shape as w")
}

/// A model plus per-weight-tensor and per-activation-site quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: Model,
    pub wbits: u8,
    pub abits: u8,
    /// One entry per conv/linear weight tensor, in forward order.
    pub wq: Vec<QuantParam>,
    /// One entry per activation site, in forward order.
    pub aq: Vec<QuantParam>,
    pub stage: Stage,
}

impl QuantizedModel {
    /// Calibrate weight steps for `model` at the given widths. Activation
    /// quantizers start disabled until [`calibrate_activations`] runs.
    pub fn calibrate(model: Model, wbits: u8, abits: u8) -> Result<QuantizedModel> {
        QuantParam::bounds(wbits)?;
        QuantParam::bounds(abits)?;
        let mut qm = QuantizedModel {
            model,
            wbits,
            abits,
            wq: Vec::new(),
            aq: Vec::new(),
            stage: Stage::Calibrated,
        };
        calibrate_weights(&mut qm)?;
        Ok(qm)
    }

    pub fn weight_tensor(&self, widx: usize) -> &Tensor {
        let pidx = self.model.weight_param_indices()[widx];
        &self.model.params[pidx].tensor
    }

    /// Dequantized weights under the current stage, one per inventory entry.
    pub fn dequantized_weights(&self) -> Result<Vec<Tensor>> {
        let indices = self.model.weight_param_indices();
        indices
            .iter()
            .zip(&self.wq)
            .map(|(&pidx, q)| Ok(quantize(&self.model.params[pidx].tensor, q)?.1))
            .collect()
    }

    /// True once activation steps have been fitted.
    pub fn activations_calibrated(&self) -> bool {
        !self.aq.is_empty()
    }
}

/// Inference policy: weights replaced by their dequantized values (computed
/// once), activation sites fake-quantized with calibrated steps.
pub struct QuantEvalPolicy {
    weights: Vec<Tensor>,
    act: Vec<QuantParam>,
}

impl QuantEvalPolicy {
    pub fn new(qm: &QuantizedModel) -> Result<QuantEvalPolicy> {
        Ok(QuantEvalPolicy {
            weights: qm.dequantized_weights()?,
            act: qm.aq.clone(),
        })
    }
}

impl ForwardPolicy for QuantEvalPolicy {
    fn weight(&self, tape: &mut Tape, widx: usize, _w: Val) -> Result<Val> {
        Ok(tape.constant(self.weights[widx].clone()))
    }

    fn activation(&self, tape: &mut Tape, site: usize, x: Val) -> Result<Val> {
        let Some(q) = self.act.get(site) else {
            return Ok(x);
        };
        let s = tape.constant(Tensor::scalar(q.step));
        tape.fq_act(x, s, q.zero as f32, q.qmin as f32, q.qmax as f32, false)
    }
}

/// Eval-mode logits of the quantized model.
pub fn logits(qm: &QuantizedModel, images: &Tensor) -> Result<Tensor> {
    let policy = QuantEvalPolicy::new(qm)?;
    train::logits_with_policy(&qm.model, images, &policy)
}

/// Top-1 accuracy of the quantized model, deterministic.
pub fn evaluate(qm: &QuantizedModel, images: &Tensor, labels: &[u16]) -> Result<f64> {
    let l = logits(qm, images)?;
    train::accuracy_from_logits(&l, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::rng::Rng;

    fn qp(bits: u8, step: f32, zero: i32) -> QuantParam {
        QuantParam::new(bits, step, zero, Role::Weight).unwrap()
    }

    #[test]
    fn zero_weights_quantize_to_zero() {
        let w = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let (ints, deq) = quantize(&w, &qp(4, 0.25, 0)).unwrap();
        assert_eq!(ints, vec![0, 0]);
        assert_eq!(deq.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_applied_quantization() {
        // w=[-1.0, 0.3, 0.7], s=0.5, b=4, z=2 -> ints [0,3,3], deq [-1.0, 0.5, 0.5]
        let w = Tensor::from_vec(&[3], vec![-1.0, 0.3, 0.7]).unwrap();
        let (ints, deq) = quantize(&w, &qp(4, 0.5, 2)).unwrap();
        assert_eq!(ints, vec![0, 3, 3]);
        assert_eq!(deq.data(), &[-1.0, 0.5, 0.5]);
    }

    #[test]
    fn clipping_branch() {
        // w=[10.0], s=0.5, z=2, b=4 -> int 15 (clipped), deq 6.5
        let w = Tensor::from_vec(&[1], vec![10.0]).unwrap();
        let (ints, deq) = quantize(&w, &qp(4, 0.5, 2)).unwrap();
        assert_eq!(ints, vec![15]);
        assert_eq!(deq.data(), &[6.5]);
    }

    #[test]
    fn non_positive_step_is_parameter_error() {
        assert!(matches!(
            QuantParam::new(4, 0.0, 0, Role::Weight),
            Err(Error::QuantParam(_))
        ));
    }

    #[test]
    fn quantize_is_idempotent_on_own_output() {
        let mut rng = Rng::new(3);
        let q = qp(4, 0.37, 5);
        let mut w = Tensor::zeros(&[64]);
        let (lo, hi) = q.dequant_range();
        rng.fill_uniform(w.data_mut(), lo, hi);
        let (_, wq) = quantize(&w, &q).unwrap();
        let (_, wq2) = quantize(&wq, &q).unwrap();
        assert_eq!(wq, wq2);
    }

    #[test]
    fn monotone_in_w_for_fixed_params() {
        let mut rng = Rng::new(4);
        let q = qp(3, 0.21, 3);
        for _ in 0..200 {
            let a = rng.uniform(-3.0, 3.0);
            let b = a + rng.uniform(0.0, 2.0);
            let w = Tensor::from_vec(&[2], vec![a, b]).unwrap();
            let (ints, _) = quantize(&w, &q).unwrap();
            assert!(ints[0] <= ints[1], "{a} {b} -> {ints:?}");
        }
    }

    #[test]
    fn nearest_init_v_reproduces_nearest_rounding_bitwise() {
        let mut rng = Rng::new(5);
        for trial in 0..50 {
            let mut w = Tensor::zeros(&[33]);
            rng.fill_uniform(w.data_mut(), -2.0, 2.0);
            let step = rng.uniform(0.05, 0.8);
            let mut q = qp(4, step, rng.below(16) as i32);
            let (nearest_ints, nearest_deq) = quantize(&w, &q).unwrap();
            q.v = Some(nearest_rounding_v(&w, &q));
            q.stage = Stage::Reconstructed;
            let (ints, deq) = quantize(&w, &q).unwrap();
            assert_eq!(nearest_ints, ints, "trial {trial}");
            assert_eq!(nearest_deq, deq, "trial {trial}");
        }
    }

    #[test]
    fn nearest_init_handles_exact_half_ties() {
        // half fractions must follow round-half-away-from-zero on both signs
        let q = qp(4, 0.5, 8);
        let w = Tensor::from_vec(&[4], vec![1.25, -1.25, 0.25, -0.25]).unwrap();
        let (nearest_ints, _) = quantize(&w, &q).unwrap();
        let mut q2 = q.clone();
        q2.v = Some(nearest_rounding_v(&w, &q));
        q2.stage = Stage::Reconstructed;
        let (ints, _) = quantize(&w, &q2).unwrap();
        assert_eq!(nearest_ints, ints);
    }

    #[test]
    fn reconstructed_stage_requires_v() {
        let mut q = qp(4, 0.5, 0);
        q.stage = Stage::Reconstructed;
        let w = Tensor::from_vec(&[1], vec![0.3]).unwrap();
        assert!(matches!(quantize(&w, &q), Err(Error::QuantParam(_))));
    }

    #[test]
    fn round_trip_bound_within_half_step() {
        let mut rng = Rng::new(6);
        for _ in 0..200 {
            let bits = [2u8, 3, 4, 8][rng.below(4)];
            let step = rng.uniform(0.01, 1.0);
            let (qmin, qmax) = QuantParam::bounds(bits).unwrap();
            let zero = rng.below((qmax - qmin + 1) as usize) as i32;
            let q = qp(bits, step, zero);
            let (lo, hi) = q.dequant_range();
            let mut w = Tensor::zeros(&[16]);
            rng.fill_uniform(w.data_mut(), lo, hi);
            let (_, deq) = quantize(&w, &q).unwrap();
            for (a, b) in w.data().iter().zip(deq.data()) {
                assert!(
                    ((a - b).abs() as f64) <= step as f64 * (0.5 + 1e-6),
                    "|{a} - {b}| > s/2 (s={step})"
                );
            }
        }
    }
}
