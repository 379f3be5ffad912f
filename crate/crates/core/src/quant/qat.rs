//! QAT finetuning on top of the PTQ solution.
//!
//! Weights and the learned rounding v stay frozen. Each weight tensor gets a
//! fresh all-zero offset u, so quantization becomes
//! clip(floor(w/s) + sign(v) + round(u/s) + z, n, p) and the model at step
//! zero is numerically identical to the PTQ model. u is updated through the
//! straight-through estimator; activation steps get the learned-step-size
//! gradient scaled by 1/sqrt(N·p). Optimizer is SGD with momentum under a
//! cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nnkit::model::{ForwardPolicy, Mode, RunCfg};
use crate::nnkit::rng::Rng;
use crate::nnkit::tape::{Tape, Val, WeightRounding};
use crate::nnkit::tensor::Tensor;
use crate::quant::{QuantizedModel, Stage};

#[derive(Debug, Clone)]
pub struct QatCfg {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for QatCfg {
    fn default() -> Self {
        QatCfg {
            epochs: 20,
            lr: 0.001,
            momentum: 0.9,
            batch: 64,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QatLog {
    pub epoch_losses: Vec<f64>,
}

/// Training policy: frozen weights and rounding, live u offsets and live
/// activation steps.
struct QatPolicy<'a> {
    qm: &'a QuantizedModel,
    u_vals: &'a [Val],
    s_vals: &'a [Val],
}

impl ForwardPolicy for QatPolicy<'_> {
    fn weight(&self, tape: &mut Tape, widx: usize, w: Val) -> Result<Val> {
        let q = &self.qm.wq[widx];
        let v =
            tape.constant(q.v.clone().ok_or_else(|| {
                Error::Stage("QAT forward requires reconstructed rounding".into())
            })?);
        tape.fq_weight(
            w,
            Some(v),
            Some(self.u_vals[widx]),
            q.fq_meta(),
            WeightRounding::FloorSignOffset,
            false,
        )
    }

    fn activation(&self, tape: &mut Tape, site: usize, x: Val) -> Result<Val> {
        let q = &self.qm.aq[site];
        tape.fq_act(
            x,
            self.s_vals[site],
            q.zero as f32,
            q.qmin as f32,
            q.qmax as f32,
            false,
        )
    }
}

fn cosine_lr(base: f32, epoch: usize, total: usize) -> f32 {
    if total <= 1 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f32::consts::PI * epoch as f32 / total as f32).cos())
}

/// Finetune the quantized model on labeled data. Requires the reconstructed
/// stage; initializes all-zero u vectors and transitions the model to the
/// QAT stage even for zero epochs (in which case nothing changes
/// numerically).
pub fn qat_finetune(
    qm: &mut QuantizedModel,
    images: &Tensor,
    labels: &[u16],
    cfg: &QatCfg,
) -> Result<QatLog> {
    if qm.stage != Stage::Reconstructed {
        return Err(Error::Stage(format!(
            "QAT requires a reconstructed model, found stage {}",
            qm.stage.name()
        )));
    }
    if !qm.activations_calibrated() {
        return Err(Error::Stage(
            "QAT requires calibrated activation steps".into(),
        ));
    }
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    // reinitialize an all-zero offset per weight tensor
    let mut u_cur: Vec<Tensor> = {
        let indices = qm.model.weight_param_indices();
        indices
            .iter()
            .map(|&pidx| Tensor::zeros(qm.model.params[pidx].tensor.shape()))
            .collect()
    };
    let mut s_cur: Vec<f32> = qm.aq.iter().map(|q| q.step).collect();
    let mut u_vel: Vec<Tensor> = u_cur.iter().map(|u| Tensor::zeros(u.shape())).collect();
    let mut s_vel: Vec<f32> = vec![0.0; s_cur.len()];
    let mut rng = Rng::new(cfg.seed).split(0x716174); // "qat"
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = QatLog {
        epoch_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let batch_imgs = images.gather_batch(chunk)?;
            let batch_labels: Vec<u16> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let u_vals: Vec<Val> = u_cur.iter().map(|u| tape.leaf(u.clone(), true)).collect();
            let s_vals: Vec<Val> = s_cur
                .iter()
                .map(|&s| tape.leaf(Tensor::scalar(s), true))
                .collect();
            let policy = QatPolicy {
                qm,
                u_vals: &u_vals,
                s_vals: &s_vals,
            };
            let out = qm.model.run(
                &mut tape,
                &batch_imgs,
                &RunCfg {
                    mode: Mode::Eval,
                    ..RunCfg::eval(&policy)
                },
            )?;
            let logits = out.logits.expect("qat forward reaches the head");
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            let loss_val = tape.value(loss).item()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "qat epoch {epoch}, batch {batches}: loss {loss_val}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            tape.backward(loss)?;
            for (k, u) in u_cur.iter_mut().enumerate() {
                let Some(grad) = tape.grad(u_vals[k]) else {
                    continue;
                };
                let vel = u_vel[k].data_mut();
                for ((v, &g), w) in vel.iter_mut().zip(grad.data()).zip(u.data_mut().iter_mut()) {
                    *v = cfg.momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            for (k, s) in s_cur.iter_mut().enumerate() {
                let Some(grad) = tape.grad(s_vals[k]) else {
                    continue;
                };
                // learned-step-size gradient scale 1/sqrt(N * p)
                let numel = act_site_numel(qm, k, chunk.len());
                let scale = 1.0 / ((numel as f32) * qm.aq[k].qmax as f32).sqrt();
                let g = grad.data()[0] * scale;
                s_vel[k] = cfg.momentum * s_vel[k] + g;
                *s = (*s - lr * s_vel[k]).max(1e-6);
            }
        }
        log.epoch_losses.push(if batches > 0 {
            loss_sum / batches as f64
        } else {
            0.0
        });
    }
    let indices = qm.model.weight_param_indices();
    for (k, _) in indices.iter().enumerate() {
        qm.wq[k].u = Some(std::mem::replace(&mut u_cur[k], Tensor::scalar(0.0)));
        qm.wq[k].stage = Stage::QatFinetuned;
    }
    for (k, q) in qm.aq.iter_mut().enumerate() {
        q.step = s_cur[k];
    }
    qm.stage = Stage::QatFinetuned;
    Ok(log)
}

/// Element count of one activation site's tensor for a given batch size,
/// used by the step-gradient scale.
fn act_site_numel(qm: &QuantizedModel, site: usize, batch: usize) -> usize {
    use crate::nnkit::model::Arch;
    match qm.model.arch {
        Arch::TinyCnn => {
            let dims = [16 * 16 * 16, 32 * 8 * 8, 64 * 4 * 4, 64 * 4 * 4, 64];
            batch * dims[site]
        }
        Arch::TinyVit => {
            let blocks = (qm.model.num_act_sites() - 1) / 2;
            if site == 2 * blocks {
                batch * 64
            } else if site % 2 == 0 {
                batch * 65 * 64
            } else {
                batch * 65 * 128
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::model::{Arch, Model};
    use crate::quant::{calibrate_activations, QuantizedModel, ReconCfg};

    fn small_setup() -> (QuantizedModel, Tensor, Vec<u16>) {
        let model = Model::new(Arch::TinyCnn, 17);
        let mut rng = Rng::new(4);
        let mut imgs = Tensor::zeros(&[24, 3, 32, 32]);
        rng.fill_uniform(imgs.data_mut(), 0.0, 1.0);
        let labels: Vec<u16> = (0..24).map(|i| (i % 10) as u16).collect();
        let mut qm = QuantizedModel::calibrate(model, 4, 4).unwrap();
        calibrate_activations(&mut qm, &imgs).unwrap();
        let cfg = ReconCfg {
            iters: 0,
            ..ReconCfg::default()
        };
        crate::quant::reconstruct_all(&mut qm, &imgs, &cfg).unwrap();
        (qm, imgs, labels)
    }

    #[test]
    fn qat_before_reconstruction_is_stage_error() {
        let model = Model::new(Arch::TinyCnn, 17);
        let mut qm = QuantizedModel::calibrate(model, 4, 4).unwrap();
        let imgs = Tensor::full(&[4, 3, 32, 32], 0.5);
        let err = qat_finetune(&mut qm, &imgs, &[0, 1, 2, 3], &QatCfg::default());
        assert!(matches!(err, Err(Error::Stage(_))));
    }

    #[test]
    fn zero_epochs_is_logit_identical_to_ptq() {
        let (mut qm, imgs, _) = small_setup();
        let before = crate::quant::logits(&qm, &imgs).unwrap();
        let cfg = QatCfg {
            epochs: 0,
            ..QatCfg::default()
        };
        qat_finetune(&mut qm, &imgs, &vec![0u16; 24], &cfg).unwrap();
        assert_eq!(qm.stage, Stage::QatFinetuned);
        for q in &qm.wq {
            let u = q.u.as_ref().unwrap();
            assert!(u.data().iter().all(|&v| v == 0.0));
        }
        let after = crate::quant::logits(&qm, &imgs).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn qat_runs_and_loss_is_finite() {
        let (mut qm, imgs, labels) = small_setup();
        let cfg = QatCfg {
            epochs: 2,
            batch: 12,
            ..QatCfg::default()
        };
        let log = qat_finetune(&mut qm, &imgs, &labels, &cfg).unwrap();
        assert_eq!(log.epoch_losses.len(), 2);
        assert!(log.epoch_losses.iter().all(|l| l.is_finite()));
        assert_eq!(qm.stage, Stage::QatFinetuned);
    }

    #[test]
    fn qat_is_deterministic() {
        let (qm0, imgs, labels) = small_setup();
        let cfg = QatCfg {
            epochs: 1,
            batch: 12,
            seed: 9,
            ..QatCfg::default()
        };
        let mut a = qm0.clone();
        let mut b = qm0;
        qat_finetune(&mut a, &imgs, &labels, &cfg).unwrap();
        qat_finetune(&mut b, &imgs, &labels, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
