//! Float training: SGD with momentum and cosine learning-rate decay.

use crate::error::{Error, Result};
use crate::nnkit::model::{FloatPolicy, Mode, Model, RunCfg};
use crate::nnkit::rng::Rng;
use crate::nnkit::tape::Tape;
use crate::nnkit::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainCfg {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            epochs: 14,
            lr: 0.05,
            momentum: 0.9,
            batch: 64,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    /// Eval-mode accuracy on the provided held-out set, if any.
    pub final_eval_acc: Option<f64>,
}

/// Cosine learning-rate schedule over epochs.
fn cosine_lr(base: f32, epoch: usize, total: usize) -> f32 {
    if total <= 1 {
        return base;
    }
    let t = epoch as f32 / total as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Train `model` in place. Deterministic given the seed; zero epochs leaves
/// the model untouched. BN running statistics are updated once per batch.
pub fn train_float(
    model: &mut Model,
    images: &Tensor,
    labels: &[u16],
    eval: Option<(&Tensor, &[u16])>,
    cfg: &TrainCfg,
) -> Result<TrainLog> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let classes = crate::nnkit::model::NUM_CLASSES as u16;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {bad} outside model class count"
        )));
    }
    let mut rng = Rng::new(cfg.seed).split(0x747261696e); // "train"
    let mut velocity: Vec<Tensor> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(p.tensor.shape()))
        .collect();
    let mut log = TrainLog {
        epoch_losses: Vec::new(),
        final_eval_acc: None,
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                // BN train mode needs at least two values per channel
                continue;
            }
            let batch_imgs = images.gather_batch(chunk)?;
            let batch_labels: Vec<u16> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let out = model.run(&mut tape, &batch_imgs, &RunCfg::train(&FloatPolicy))?;
            let logits = out
                .logits
                .expect("training forward always reaches the head");
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            let loss_val = tape.value(loss).item()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {batches}: loss {loss_val}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;
            tape.backward(loss)?;
            for (i, param) in model.params.iter_mut().enumerate() {
                let Some(grad) = tape.grad(out.param_vals[i]) else {
                    continue;
                };
                let vel = velocity[i].data_mut();
                let data = param.tensor.data_mut();
                for ((v, g), w) in vel.iter_mut().zip(grad.data()).zip(data.iter_mut()) {
                    *v = cfg.momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            // running stats update is the explicit per-batch flag in action
            let stats: Vec<(Vec<f32>, Vec<f32>, usize)> = out
                .bn_nodes
                .iter()
                .map(|&node| {
                    let (mean, var) = tape.bn_batch_stats(node).expect("bn node");
                    let s = tape.value(node).shape();
                    (mean.to_vec(), var.to_vec(), s[0] * s[2] * s[3])
                })
                .collect();
            for (layer, (mean, var, m)) in stats.iter().enumerate() {
                model.update_bn_running(layer, mean, var, *m);
            }
        }
        log.epoch_losses.push(if batches > 0 {
            loss_sum / batches as f64
        } else {
            0.0
        });
    }
    if let Some((ei, el)) = eval {
        log.final_eval_acc = Some(evaluate(model, ei, el)?);
    }
    Ok(log)
}

/// Top-1 accuracy of the float model in eval mode. Deterministic; ties go to
/// the lowest class index.
pub fn evaluate(model: &Model, images: &Tensor, labels: &[u16]) -> Result<f64> {
    let logits = eval_logits(model, images)?;
    accuracy_from_logits(&logits, labels)
}

/// Eval-mode logits for a whole dataset, batched internally.
pub fn eval_logits(model: &Model, images: &Tensor) -> Result<Tensor> {
    logits_with_policy(model, images, &FloatPolicy)
}

pub(crate) fn logits_with_policy(
    model: &Model,
    images: &Tensor,
    policy: &dyn crate::nnkit::model::ForwardPolicy,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let classes = crate::nnkit::model::NUM_CLASSES;
    let mut out = Vec::with_capacity(n * classes);
    let batch = 64;
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let slice = images.slice_batch(start, len)?;
        let mut tape = Tape::new();
        let run = model.run(
            &mut tape,
            &slice,
            &RunCfg {
                mode: Mode::Eval,
                ..RunCfg::eval(policy)
            },
        )?;
        out.extend_from_slice(tape.value(run.logits.expect("eval forward")).data());
        start += len;
    }
    Tensor::new(vec![n, classes], out)
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[u16]) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    let c = logits.shape()[1];
    let mut hits = 0usize;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}
