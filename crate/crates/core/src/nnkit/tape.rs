//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! Each differentiable operation executes eagerly and records one node. The
//! tape is dynamic (rebuilt per forward pass) and supports a single scalar
//! backward, which is all the losses in the pipeline need. Replaying the tape
//! backward visits nodes in exact reverse execution order; gradients of
//! leaves never touched by the loss are zero.
//!
//! Fake-quantization lives here as first-class ops: the learned-rounding
//! weight quantizer (soft rectified-sigmoid relaxation and the hard
//! floor-plus-sign form), the QAT offset path, and the learned-step
//! activation quantizer with its straight-through gradients.

use crate::error::{Error, Result};
use crate::nnkit::kernels::{self, ConvMeta};
use crate::nnkit::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Rounding mode of the weight fake-quantizer, one per quantization stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRounding {
    /// round(w/s): plain calibrated quantization.
    Nearest,
    /// floor(w/s) + sign(v): learned rounding after reconstruction.
    FloorSign,
    /// floor(w/s) + sign(v) + round(u/s): QAT with the frozen rounding and a
    /// trainable offset.
    FloorSignOffset,
}

/// Per-tensor quantizer constants shared by the fake-quant ops.
#[derive(Debug, Clone, Copy)]
pub struct FqMeta {
    pub step: f32,
    pub zero: f32,
    pub qmin: f32,
    pub qmax: f32,
}

const RSIG_ZETA: f32 = 1.1;
const RSIG_GAMMA: f32 = -0.1;

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Rectified sigmoid used to relax the binary rounding decision into [0, 1].
pub fn rect_sigmoid(v: f32) -> f32 {
    (sigmoid(v) * (RSIG_ZETA - RSIG_GAMMA) + RSIG_GAMMA).clamp(0.0, 1.0)
}

/// Derivative of [`rect_sigmoid`]; zero in the clamped regions.
pub fn rect_sigmoid_deriv(v: f32) -> f32 {
    let s = sigmoid(v);
    let pre = s * (RSIG_ZETA - RSIG_GAMMA) + RSIG_GAMMA;
    if pre > 0.0 && pre < 1.0 {
        (RSIG_ZETA - RSIG_GAMMA) * s * (1.0 - s)
    } else {
        0.0
    }
}

/// Inverse of the rectified sigmoid on (0, 1); finite for fractions in [0, 1]
/// because the rectification leaves slack at both ends.
pub fn rect_sigmoid_inverse(h: f32) -> f32 {
    let q = ((h - RSIG_GAMMA) / (RSIG_ZETA - RSIG_GAMMA)).clamp(1e-6, 1.0 - 1e-6);
    (q / (1.0 - q)).ln()
}

/// Learned rounding goes up when v is non-negative.
#[inline]
pub fn round_up_indicator(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// The scalar weight fake-quantizer. Single source of truth shared by the
/// tape op and the eager quantizer so evaluation paths agree bitwise.
/// Returns (clipped integer level, dequantized value).
#[inline]
pub fn fq_weight_value(
    w: f32,
    v: Option<f32>,
    u: Option<f32>,
    meta: &FqMeta,
    mode: WeightRounding,
    soft: bool,
) -> (f32, f32) {
    let t = w / meta.step;
    let base = match mode {
        WeightRounding::Nearest => t.round(),
        WeightRounding::FloorSign => {
            let vi = v.expect("FloorSign requires v");
            let r = if soft {
                rect_sigmoid(vi)
            } else {
                round_up_indicator(vi)
            };
            t.floor() + r
        }
        WeightRounding::FloorSignOffset => {
            let vi = v.expect("FloorSignOffset requires v");
            let ui = u.expect("FloorSignOffset requires u");
            let off = if soft {
                ui / meta.step
            } else {
                (ui / meta.step).round()
            };
            t.floor() + round_up_indicator(vi) + off
        }
    };
    let q = (base + meta.zero).clamp(meta.qmin, meta.qmax);
    (q, meta.step * (q - meta.zero))
}

enum Node {
    Leaf,
    Matmul {
        a: Val,
        b: Val,
        transpose_b: bool,
    },
    BatchMatmul {
        a: Val,
        b: Val,
        transpose_b: bool,
    },
    Conv2d {
        x: Val,
        w: Val,
        meta: ConvMeta,
    },
    Add {
        a: Val,
        b: Val,
    },
    AddBiasRow {
        x: Val,
        b: Val,
    },
    AddBiasChannel {
        x: Val,
        b: Val,
    },
    AddPos {
        x: Val,
        pos: Val,
    },
    ConcatCls {
        cls: Val,
        x: Val,
    },
    SelectToken {
        x: Val,
        index: usize,
    },
    Scale {
        x: Val,
        c: f32,
    },
    Relu {
        x: Val,
    },
    Gelu {
        x: Val,
    },
    Softmax {
        x: Val,
    },
    LayerNorm {
        x: Val,
        gamma: Val,
        beta: Val,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    BatchNormTrain {
        x: Val,
        gamma: Val,
        beta: Val,
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_mean: Vec<f32>,
        batch_var_biased: Vec<f32>,
    },
    BatchNormEval {
        x: Val,
        gamma: Val,
        beta: Val,
        run_mean: Vec<f32>,
        run_inv_std: Vec<f32>,
    },
    GlobalAvgPool {
        x: Val,
    },
    Reshape {
        x: Val,
    },
    Permute {
        x: Val,
        perm: Vec<usize>,
    },
    CrossEntropy {
        logits: Val,
        labels: Vec<u16>,
        probs: Tensor,
    },
    Mse {
        a: Val,
        b: Val,
    },
    WeightedSum {
        x: Val,
        w: Tensor,
    },
    FqWeight {
        w: Val,
        v: Option<Val>,
        u: Option<Val>,
        meta: FqMeta,
        mode: WeightRounding,
        soft: bool,
    },
    FqAct {
        x: Val,
        s: Val,
        zero: f32,
        qmin: f32,
        qmax: f32,
        soft: bool,
    },
    RoundReg {
        v: Val,
        beta: f32,
    },
}

/// Record of executed differentiable operations with per-leaf gradient
/// accumulators.
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    needs: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, node: Node, needs: bool) -> Val {
        self.vals.push(value);
        self.nodes.push(node);
        self.needs.push(needs);
        Val(self.vals.len() - 1)
    }

    /// Register an input value. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Val {
        self.push(value, Node::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Val {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.vals[v.0]
    }

    fn needs(&self, v: Val) -> bool {
        self.needs[v.0]
    }

    /// Gradient of the most recent backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Val) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros if the loss never touched it.
    pub fn grad_or_zeros(&self, v: Val) -> Tensor {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.vals[v.0].shape()),
        }
    }

    /// Batch statistics (mean, biased variance) saved by a train-mode
    /// BatchNorm node, keyed by its output value.
    pub fn bn_batch_stats(&self, y: Val) -> Option<(&[f32], &[f32])> {
        match &self.nodes[y.0] {
            Node::BatchNormTrain {
                batch_mean,
                batch_var_biased,
                ..
            } => Some((batch_mean, batch_var_biased)),
            _ => None,
        }
    }

    // ---- ops -------------------------------------------------------------

    /// `a[M,K] · b[K,N]`, or `a[M,K] · b[N,K]ᵀ` when `transpose_b` is set.
    pub fn matmul(&mut self, a: Val, b: Val, transpose_b: bool) -> Result<Val> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let inner = if transpose_b { sb[1] } else { sb[0] };
        let n = if transpose_b { sb[0] } else { sb[1] };
        if inner != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = if transpose_b {
            kernels::matmul_nt(ta.data(), tb.data(), m, k, n)
        } else {
            kernels::matmul(ta.data(), tb.data(), m, k, n)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Node::Matmul { a, b, transpose_b },
            needs,
        ))
    }

    /// Per-group product of `a[G,M,K]` with `b[G,K,N]` (or `b[G,N,K]ᵀ`).
    pub fn batch_matmul(&mut self, a: Val, b: Val, transpose_b: bool) -> Result<Val> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let inner = if transpose_b { sb[2] } else { sb[1] };
        let n = if transpose_b { sb[1] } else { sb[2] };
        if inner != k {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut data = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let ablk = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bblk = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let c = if transpose_b {
                kernels::matmul_nt(ablk, bblk, m, k, n)
            } else {
                kernels::matmul(ablk, bblk, m, k, n)
            };
            data.extend_from_slice(&c);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], data)?,
            Node::BatchMatmul { a, b, transpose_b },
            needs,
        ))
    }

    /// 2-d convolution of `x[B,Ci,H,W]` with `w[Co,Ci,k,k]`.
    pub fn conv2d(&mut self, x: Val, w: Val, stride: usize, pad: usize) -> Result<Val> {
        let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let meta = ConvMeta {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        let y = kernels::conv2d(tx.data(), tw.data(), &meta);
        let shape = vec![meta.batch, meta.out_ch, meta.out_h(), meta.out_w()];
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(shape, y)?, Node::Conv2d { x, w, meta }, needs))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(ta.shape().to_vec(), data)?,
            Node::Add { a, b },
            needs,
        ))
    }

    /// `x[R,D] + b[D]` broadcast over rows.
    pub fn add_bias_row(&mut self, x: Val, b: Val) -> Result<Val> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[b.0]);
        let d = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (v, bias) in row.iter_mut().zip(tb.data()) {
                *v += bias;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), data)?,
            Node::AddBiasRow { x, b },
            needs,
        ))
    }

    /// `x[B,C,H,W] + b[C]` broadcast over batch and spatial dims.
    pub fn add_bias_channel(&mut self, x: Val, b: Val) -> Result<Val> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[b.0]);
        let sx = tx.shape();
        if sx.len() != 4 || tb.shape() != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_channel",
                lhs: sx.to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let mut data = tx.data().to_vec();
        for img in data.chunks_exact_mut(c * hw) {
            for (ci, plane) in img.chunks_exact_mut(hw).enumerate() {
                let bias = tb.data()[ci];
                for v in plane {
                    *v += bias;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::new(sx.to_vec(), data)?,
            Node::AddBiasChannel { x, b },
            needs,
        ))
    }

    /// `x[B,T,D] + pos[T,D]` broadcast over the batch.
    pub fn add_pos(&mut self, x: Val, pos: Val) -> Result<Val> {
        let (tx, tp) = (&self.vals[x.0], &self.vals[pos.0]);
        let sx = tx.shape();
        if sx.len() != 3 || tp.shape() != [sx[1], sx[2]] {
            return Err(Error::ShapeMismatch {
                op: "add_pos",
                lhs: sx.to_vec(),
                rhs: tp.shape().to_vec(),
            });
        }
        let td = sx[1] * sx[2];
        let mut data = tx.data().to_vec();
        for img in data.chunks_exact_mut(td) {
            for (v, p) in img.iter_mut().zip(tp.data()) {
                *v += p;
            }
        }
        let needs = self.needs(x) || self.needs(pos);
        Ok(self.push(
            Tensor::new(sx.to_vec(), data)?,
            Node::AddPos { x, pos },
            needs,
        ))
    }

    /// Prepend a learned class token `cls[1,D]` to `x[B,T,D]`.
    pub fn concat_cls(&mut self, cls: Val, x: Val) -> Result<Val> {
        let (tc, tx) = (&self.vals[cls.0], &self.vals[x.0]);
        let sx = tx.shape();
        if sx.len() != 3 || tc.shape() != [1, sx[2]] {
            return Err(Error::ShapeMismatch {
                op: "concat_cls",
                lhs: tc.shape().to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let mut data = Vec::with_capacity(b * (t + 1) * d);
        for bi in 0..b {
            data.extend_from_slice(tc.data());
            data.extend_from_slice(&tx.data()[bi * t * d..(bi + 1) * t * d]);
        }
        let needs = self.needs(cls) || self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, t + 1, d], data)?,
            Node::ConcatCls { cls, x },
            needs,
        ))
    }

    /// Take token `index` from `x[B,T,D]`, giving `[B,D]`.
    pub fn select_token(&mut self, x: Val, index: usize) -> Result<Val> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() != 3 || index >= sx[1] {
            return Err(Error::contract(format!(
                "select_token index {index} out of range for shape {sx:?}"
            )));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * t + index) * d;
            data.extend_from_slice(&tx.data()[off..off + d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, d], data)?,
            Node::SelectToken { x, index },
            needs,
        ))
    }

    pub fn scale(&mut self, x: Val, c: f32) -> Result<Val> {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), data)?,
            Node::Scale { x, c },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), data)?,
            Node::Relu { x },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Val) -> Result<Val> {
        let tx = &self.vals[x.0];
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), data)?,
            Node::Gelu { x },
            needs,
        ))
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax(&mut self, x: Val) -> Result<Val> {
        let tx = &self.vals[x.0];
        let d = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::contract("softmax on 0-d tensor"))?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            softmax_row(row);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), data)?,
            Node::Softmax { x },
            needs,
        ))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f32) -> Result<Val> {
        let (tx, tg, tb) = (&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let d = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = istd as f32;
            for i in 0..d {
                let h = ((row[i] as f64 - mean) * istd) as f32;
                xhat[r * d + i] = h;
                out[r * d + i] = tg.data()[i] * h + tb.data()[i];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), out)?,
            Node::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(tx.shape().to_vec(), xhat)?,
                inv_std,
            },
            needs,
        ))
    }

    /// Train-mode BatchNorm: normalizes with batch statistics over (B,H,W)
    /// per channel. Batch mean and biased variance are saved on the node for
    /// the caller's running-statistics update.
    pub fn batch_norm_train(&mut self, x: Val, gamma: Val, beta: Val, eps: f32) -> Result<Val> {
        let (tx, tg, tb) = (&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::contract(format!(
                "batch_norm expects 4-d input, got {sx:?}"
            )));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: sx,
                rhs: tg.shape().to_vec(),
            });
        }
        let m = b * h * w;
        if m < 2 {
            return Err(Error::contract(format!(
                "batch_norm train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let hw = h * w;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ci in 0..c {
            let mut sum = 0.0f64;
            for bi in 0..b {
                let plane = &tx.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                sum += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = sum / m as f64;
            let mut sq = 0.0f64;
            for bi in 0..b {
                let plane = &tx.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                sq += plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
            }
            mean[ci] = mu as f32;
            var[ci] = (sq / m as f64) as f32;
        }
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut out = vec![0.0f32; tx.numel()];
        let mut inv_std = vec![0.0f32; c];
        for ci in 0..c {
            inv_std[ci] = 1.0 / (var[ci] + eps).sqrt();
        }
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (g, be, mu, istd) = (tg.data()[ci], tb.data()[ci], mean[ci], inv_std[ci]);
                for i in 0..hw {
                    let hval = (tx.data()[off + i] - mu) * istd;
                    xhat[off + i] = hval;
                    out[off + i] = g * hval + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape.clone(), out)?,
            Node::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                batch_mean: mean,
                batch_var_biased: var,
            },
            needs,
        ))
    }

    /// Eval-mode BatchNorm using stored running statistics. Never updates
    /// them.
    pub fn batch_norm_eval(
        &mut self,
        x: Val,
        gamma: Val,
        beta: Val,
        run_mean: &[f32],
        run_var: &[f32],
        eps: f32,
    ) -> Result<Val> {
        let (tx, tg, tb) = (&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 || tg.shape() != [sx[1]] || tb.shape() != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: sx,
                rhs: tg.shape().to_vec(),
            });
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        if run_mean.len() != c || run_var.len() != c {
            return Err(Error::contract(format!(
                "running stats length {} does not match channels {c}",
                run_mean.len()
            )));
        }
        let run_inv_std: Vec<f32> = run_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0f32; tx.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (g, be, mu, istd) =
                    (tg.data()[ci], tb.data()[ci], run_mean[ci], run_inv_std[ci]);
                for i in 0..hw {
                    out[off + i] = g * (tx.data()[off + i] - mu) * istd + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), out)?,
            Node::BatchNormEval {
                x,
                gamma,
                beta,
                run_mean: run_mean.to_vec(),
                run_inv_std,
            },
            needs,
        ))
    }

    /// Mean over the spatial dims of `x[B,C,H,W]`, giving `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Val) -> Result<Val> {
        let tx = &self.vals[x.0];
        let sx = tx.shape();
        if sx.len() != 4 {
            return Err(Error::contract(format!(
                "global_avg_pool expects 4-d input, got {sx:?}"
            )));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let mut out = vec![0.0f32; b * c];
        for (i, plane) in tx.data().chunks_exact(hw).enumerate() {
            out[i] = plane.iter().sum::<f32>() / hw as f32;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, c], out)?,
            Node::GlobalAvgPool { x },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Val, shape: &[usize]) -> Result<Val> {
        let t = self.vals[x.0].reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Node::Reshape { x }, needs))
    }

    /// Axis permutation (materialized).
    pub fn permute(&mut self, x: Val, perm: &[usize]) -> Result<Val> {
        let tx = &self.vals[x.0];
        let t = permute_tensor(tx, perm)?;
        let needs = self.needs(x);
        Ok(self.push(
            t,
            Node::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Mean cross-entropy of `logits[N,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Val, labels: &[u16]) -> Result<Val> {
        let tl = &self.vals[logits.0];
        let sl = tl.shape();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::contract(format!(
                "cross_entropy: logits shape {sl:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64
                + row
                    .iter()
                    .map(|&v| ((v - max) as f64).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[label as usize] as f64;
            softmax_row(row);
        }
        let loss = (loss / n as f64) as f32;
        let needs = self.needs(logits);
        let shape = tl.shape().to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            Node::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::new(shape, probs)?,
            },
            needs,
        ))
    }

    /// Mean squared error between two same-shape values.
    pub fn mse(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = ta.numel() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar((s / n) as f32), Node::Mse { a, b }, needs))
    }

    /// Scalar `Σ x∘w` against a constant weighting tensor.
    pub fn weighted_sum(&mut self, x: Val, w: &Tensor) -> Result<Val> {
        let tx = &self.vals[x.0];
        if tx.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: tx.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let s: f32 = tx.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Node::WeightedSum { x, w: w.clone() },
            needs,
        ))
    }

    /// Weight fake-quantization.
    ///
    /// Hard form (`soft = false`) is the inference path:
    ///   Nearest:          clip(round(w/s) + z, n, p)
    ///   FloorSign:        clip(floor(w/s) + sign(v) + z, n, p)
    ///   FloorSignOffset:  clip(floor(w/s) + sign(v) + round(u/s) + z, n, p)
    /// then dequantized as s·(w_int − z). The soft form relaxes the rounding
    /// (rectified sigmoid for v, identity for round(u/s)) so the
    /// straight-through surrogate is an actual differentiable function.
    pub fn fq_weight(
        &mut self,
        w: Val,
        v: Option<Val>,
        u: Option<Val>,
        meta: FqMeta,
        mode: WeightRounding,
        soft: bool,
    ) -> Result<Val> {
        if !(meta.step > 0.0) {
            return Err(Error::QuantParam(format!(
                "non-positive step {}",
                meta.step
            )));
        }
        let tw = &self.vals[w.0];
        let shape = tw.shape().to_vec();
        for (name, opt) in [("v", v), ("u", u)] {
            if let Some(val) = opt {
                if self.vals[val.0].shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: if name == "v" {
                            "fq_weight v"
                        } else {
                            "fq_weight u"
                        },
                        lhs: shape,
                        rhs: self.vals[val.0].shape().to_vec(),
                    });
                }
            }
        }
        match mode {
            WeightRounding::Nearest => {}
            WeightRounding::FloorSign => {
                if v.is_none() {
                    return Err(Error::QuantParam("FloorSign rounding requires v".into()));
                }
            }
            WeightRounding::FloorSignOffset => {
                if v.is_none() || u.is_none() {
                    return Err(Error::QuantParam("FloorSignOffset requires v and u".into()));
                }
            }
        }
        let n = tw.numel();
        let mut out = vec![0.0f32; n];
        {
            let wd = self.vals[w.0].data();
            let vd = v.map(|h| self.vals[h.0].data());
            let ud = u.map(|h| self.vals[h.0].data());
            for i in 0..n {
                let (_, deq) =
                    fq_weight_value(wd[i], vd.map(|d| d[i]), ud.map(|d| d[i]), &meta, mode, soft);
                out[i] = deq;
            }
        }
        let needs = self.needs(w)
            || v.map(|h| self.needs(h)).unwrap_or(false)
            || u.map(|h| self.needs(h)).unwrap_or(false);
        let shape = self.vals[w.0].shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Node::FqWeight {
                w,
                v,
                u,
                meta,
                mode,
                soft,
            },
            needs,
        ))
    }

    /// Activation fake-quantization with a learnable step (LSQ-style).
    ///
    /// Hard: s·(clip(round(x/s) + z, n, p) − z). Soft replaces round with
    /// identity, making the straight-through surrogate explicit. Gradients:
    /// pass-through to x strictly inside the clip range; the step receives
    /// the standard learned-step-size gradient (raw, without the global
    /// gradient scale, which the optimizer applies).
    pub fn fq_act(
        &mut self,
        x: Val,
        s: Val,
        zero: f32,
        qmin: f32,
        qmax: f32,
        soft: bool,
    ) -> Result<Val> {
        let ts = &self.vals[s.0];
        if !ts.is_scalar() {
            return Err(Error::QuantParam(
                "activation step must be a scalar tensor".into(),
            ));
        }
        let sv = ts.data()[0];
        if !(sv > 0.0) {
            return Err(Error::QuantParam(format!("non-positive step {sv}")));
        }
        let tx = &self.vals[x.0];
        let mut out = vec![0.0f32; tx.numel()];
        for (o, &xi) in out.iter_mut().zip(tx.data()) {
            let t = if soft {
                xi / sv + zero
            } else {
                (xi / sv).round() + zero
            };
            *o = sv * (t.clamp(qmin, qmax) - zero);
        }
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(
            Tensor::new(tx.shape().to_vec(), out)?,
            Node::FqAct {
                x,
                s,
                zero,
                qmin,
                qmax,
                soft,
            },
            needs,
        ))
    }

    /// Annealed rounding regularizer `Σᵢ (1 − |2h(vᵢ) − 1|^β)`, which pushes
    /// the relaxed rounding toward a binary choice as β decreases.
    pub fn round_reg(&mut self, v: Val, beta: f32) -> Result<Val> {
        let tv = &self.vals[v.0];
        let s: f64 = tv
            .data()
            .iter()
            .map(|&vi| {
                let h = rect_sigmoid(vi) as f64;
                1.0 - (2.0 * h - 1.0).abs().powf(beta as f64)
            })
            .sum();
        let needs = self.needs(v);
        Ok(self.push(Tensor::scalar(s as f32), Node::RoundReg { v, beta }, needs))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate `d loss / d leaf` for every leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.grads = (0..self.vals.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &g)?;
            if matches!(self.nodes[i], Node::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Val, contrib: Tensor) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn apply_backward(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Node payloads are tiny (handles and saved stats); clone what the
        // rules need so `self` stays free for accumulation.
        match &self.nodes[i] {
            Node::Leaf => Ok(()),
            Node::Matmul { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let (m, k) = (self.vals[a.0].shape()[0], self.vals[a.0].shape()[1]);
                let n = self.vals[i].shape()[1];
                let (ad, bd, gd) = (self.vals[a.0].data(), self.vals[b.0].data(), g.data());
                let (da, db) = if tb {
                    (
                        kernels::matmul(gd, bd, m, n, k),
                        kernels::matmul_tn(gd, ad, n, m, k),
                    )
                } else {
                    (
                        kernels::matmul_nt(gd, bd, m, n, k),
                        kernels::matmul_tn(ad, gd, k, m, n),
                    )
                };
                let sa = self.vals[a.0].shape().to_vec();
                let sb = self.vals[b.0].shape().to_vec();
                self.acc(a, Tensor::new(sa, da)?);
                self.acc(b, Tensor::new(sb, db)?);
                Ok(())
            }
            Node::BatchMatmul { a, b, transpose_b } => {
                let (a, b, tb) = (*a, *b, *transpose_b);
                let sa = self.vals[a.0].shape().to_vec();
                let sb = self.vals[b.0].shape().to_vec();
                let (gr, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.vals[i].shape()[2];
                let mut da = Vec::with_capacity(gr * m * k);
                let mut db = Vec::with_capacity(sb.iter().product());
                for gi in 0..gr {
                    let ablk = &self.vals[a.0].data()[gi * m * k..(gi + 1) * m * k];
                    let bn = k * n;
                    let bblk = &self.vals[b.0].data()[gi * bn..(gi + 1) * bn];
                    let gblk = &g.data()[gi * m * n..(gi + 1) * m * n];
                    if tb {
                        da.extend_from_slice(&kernels::matmul(gblk, bblk, m, n, k));
                        db.extend_from_slice(&kernels::matmul_tn(gblk, ablk, n, m, k));
                    } else {
                        da.extend_from_slice(&kernels::matmul_nt(gblk, bblk, m, n, k));
                        db.extend_from_slice(&kernels::matmul_tn(ablk, gblk, k, m, n));
                    }
                }
                self.acc(a, Tensor::new(sa, da)?);
                self.acc(b, Tensor::new(sb, db)?);
                Ok(())
            }
            Node::Conv2d { x, w, meta } => {
                let (x, w, meta) = (*x, *w, *meta);
                let want_dx = self.needs(x);
                let (dx, dw) = kernels::conv2d_backward(
                    self.vals[x.0].data(),
                    self.vals[w.0].data(),
                    g.data(),
                    &meta,
                    want_dx,
                );
                if let Some(dx) = dx {
                    let sx = self.vals[x.0].shape().to_vec();
                    self.acc(x, Tensor::new(sx, dx)?);
                }
                let sw = self.vals[w.0].shape().to_vec();
                self.acc(w, Tensor::new(sw, dw)?);
                Ok(())
            }
            Node::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g.clone());
                self.acc(b, g.clone());
                Ok(())
            }
            Node::AddBiasRow { x, b } => {
                let (x, b) = (*x, *b);
                let d = self.vals[b.0].numel();
                let mut db = vec![0.0f32; d];
                for row in g.data().chunks_exact(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.acc(x, g.clone());
                self.acc(b, Tensor::new(vec![d], db)?);
                Ok(())
            }
            Node::AddBiasChannel { x, b } => {
                let (x, b) = (*x, *b);
                let sx = self.vals[x.0].shape();
                let (c, hw) = (sx[1], sx[2] * sx[3]);
                let mut db = vec![0.0f32; c];
                for img in g.data().chunks_exact(c * hw) {
                    for (ci, plane) in img.chunks_exact(hw).enumerate() {
                        db[ci] += plane.iter().sum::<f32>();
                    }
                }
                self.acc(x, g.clone());
                self.acc(b, Tensor::new(vec![c], db)?);
                Ok(())
            }
            Node::AddPos { x, pos } => {
                let (x, pos) = (*x, *pos);
                let td = self.vals[pos.0].numel();
                let mut dp = vec![0.0f32; td];
                for img in g.data().chunks_exact(td) {
                    for (acc, v) in dp.iter_mut().zip(img) {
                        *acc += v;
                    }
                }
                let sp = self.vals[pos.0].shape().to_vec();
                self.acc(x, g.clone());
                self.acc(pos, Tensor::new(sp, dp)?);
                Ok(())
            }
            Node::ConcatCls { cls, x } => {
                let (cls, x) = (*cls, *x);
                let sx = self.vals[x.0].shape().to_vec();
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let mut dc = vec![0.0f32; d];
                let mut dx = vec![0.0f32; b * t * d];
                for bi in 0..b {
                    let img = &g.data()[bi * (t + 1) * d..(bi + 1) * (t + 1) * d];
                    for (acc, v) in dc.iter_mut().zip(&img[..d]) {
                        *acc += v;
                    }
                    dx[bi * t * d..(bi + 1) * t * d].copy_from_slice(&img[d..]);
                }
                self.acc(cls, Tensor::new(vec![1, d], dc)?);
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::SelectToken { x, index } => {
                let (x, index) = (*x, *index);
                let sx = self.vals[x.0].shape().to_vec();
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0f32; b * t * d];
                for bi in 0..b {
                    let off = (bi * t + index) * d;
                    dx[off..off + d].copy_from_slice(&g.data()[bi * d..(bi + 1) * d]);
                }
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f32> = g.data().iter().map(|v| v * c).collect();
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::Relu { x } => {
                let x = *x;
                let dx: Vec<f32> = self.vals[x.0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::Gelu { x } => {
                let x = *x;
                let dx: Vec<f32> = self.vals[x.0]
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * gelu_deriv(xi))
                    .collect();
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::Softmax { x } => {
                let x = *x;
                let d = *self.vals[i].shape().last().unwrap();
                let y = self.vals[i].data();
                let mut dx = vec![0.0f32; y.len()];
                for (r, grow) in g.data().chunks_exact(d).enumerate() {
                    let yrow = &y[r * d..(r + 1) * d];
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx[r * d + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.vals[gamma.0].numel();
                let rows = xhat.numel() / d;
                let gd = self.vals[gamma.0].data().to_vec();
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                let mut dx = vec![0.0f32; xhat.numel()];
                for r in 0..rows {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat.data()[r * d..(r + 1) * d];
                    let mut sum_gg = 0.0f32;
                    let mut sum_ggh = 0.0f32;
                    for c in 0..d {
                        dgamma[c] += grow[c] * hrow[c];
                        dbeta[c] += grow[c];
                        let gg = grow[c] * gd[c];
                        sum_gg += gg;
                        sum_ggh += gg * hrow[c];
                    }
                    let istd = inv_std[r];
                    let inv_d = 1.0 / d as f32;
                    for c in 0..d {
                        let gg = grow[c] * gd[c];
                        dx[r * d + c] = istd * (gg - inv_d * sum_gg - hrow[c] * inv_d * sum_ggh);
                    }
                }
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, Tensor::new(sx, dx)?);
                self.acc(gamma, Tensor::new(vec![d], dgamma)?);
                self.acc(beta, Tensor::new(vec![d], dbeta)?);
                Ok(())
            }
            Node::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let sx = self.vals[x.0].shape().to_vec();
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let m = (b * hw) as f32;
                let gd = self.vals[gamma.0].data().to_vec();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gh = vec![0.0f32; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for k in 0..hw {
                            let gi = g.data()[off + k];
                            let hi = xhat.data()[off + k];
                            dbeta[ci] += gi;
                            dgamma[ci] += gi * hi;
                            sum_g[ci] += gi;
                            sum_gh[ci] += gi * hi;
                        }
                    }
                }
                let mut dx = vec![0.0f32; xhat.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        let coef = gd[ci] * inv_std[ci];
                        for k in 0..hw {
                            let gi = g.data()[off + k];
                            let hi = xhat.data()[off + k];
                            dx[off + k] = coef * (gi - sum_g[ci] / m - hi * sum_gh[ci] / m);
                        }
                    }
                }
                self.acc(x, Tensor::new(sx, dx)?);
                self.acc(gamma, Tensor::new(vec![c], dgamma)?);
                self.acc(beta, Tensor::new(vec![c], dbeta)?);
                Ok(())
            }
            Node::BatchNormEval {
                x,
                gamma,
                beta,
                run_mean,
                run_inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (rm, ris) = (run_mean.clone(), run_inv_std.clone());
                let sx = self.vals[x.0].shape().to_vec();
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let gd = self.vals[gamma.0].data().to_vec();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = vec![0.0f32; g.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * hw;
                        for k in 0..hw {
                            let gi = g.data()[off + k];
                            let xh = (self.vals[x.0].data()[off + k] - rm[ci]) * ris[ci];
                            dbeta[ci] += gi;
                            dgamma[ci] += gi * xh;
                            dx[off + k] = gi * gd[ci] * ris[ci];
                        }
                    }
                }
                self.acc(x, Tensor::new(sx, dx)?);
                self.acc(gamma, Tensor::new(vec![c], dgamma)?);
                self.acc(beta, Tensor::new(vec![c], dbeta)?);
                Ok(())
            }
            Node::GlobalAvgPool { x } => {
                let x = *x;
                let sx = self.vals[x.0].shape().to_vec();
                let hw = sx[2] * sx[3];
                let mut dx = vec![0.0f32; self.vals[x.0].numel()];
                for (i, plane) in dx.chunks_exact_mut(hw).enumerate() {
                    let v = g.data()[i] / hw as f32;
                    plane.fill(v);
                }
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::Reshape { x } => {
                let x = *x;
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, g.reshaped(&sx)?);
                Ok(())
            }
            Node::Permute { x, perm } => {
                let (x, perm) = (*x, perm.clone());
                let inv = inverse_perm(&perm);
                let dx = permute_tensor(g, &inv)?;
                self.acc(x, dx);
                Ok(())
            }
            Node::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let gs = g.data()[0];
                let c = probs.shape()[1];
                let n = labels.len();
                let mut dl = probs.data().to_vec();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * c + label as usize] -= 1.0;
                }
                let scale = gs / n as f32;
                for v in &mut dl {
                    *v *= scale;
                }
                let sl = probs.shape().to_vec();
                self.acc(logits, Tensor::new(sl, dl)?);
                Ok(())
            }
            Node::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let gs = g.data()[0];
                let n = self.vals[a.0].numel() as f32;
                let scale = 2.0 * gs / n;
                let diff: Vec<f32> = self.vals[a.0]
                    .data()
                    .iter()
                    .zip(self.vals[b.0].data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let sa = self.vals[a.0].shape().to_vec();
                if self.needs(b) {
                    let neg: Vec<f32> = diff.iter().map(|v| -v).collect();
                    self.acc(b, Tensor::new(sa.clone(), neg)?);
                }
                self.acc(a, Tensor::new(sa, diff)?);
                Ok(())
            }
            Node::WeightedSum { x, w } => {
                let x = *x;
                let gs = g.data()[0];
                let dx: Vec<f32> = w.data().iter().map(|v| v * gs).collect();
                let sx = self.vals[x.0].shape().to_vec();
                self.acc(x, Tensor::new(sx, dx)?);
                Ok(())
            }
            Node::FqWeight {
                w,
                v,
                u,
                meta,
                mode,
                soft,
            } => {
                let (w, v, u, meta, mode, soft) = (*w, *v, *u, *meta, *mode, *soft);
                let n = self.vals[w.0].numel();
                let sw = self.vals[w.0].shape().to_vec();
                let mut dw = if self.needs(w) {
                    Some(vec![0.0f32; n])
                } else {
                    None
                };
                let mut dv = match v {
                    Some(h) if self.needs(h) => Some(vec![0.0f32; n]),
                    _ => None,
                };
                let mut du = match u {
                    Some(h) if self.needs(h) => Some(vec![0.0f32; n]),
                    _ => None,
                };
                {
                    let wd = self.vals[w.0].data();
                    let vd = v.map(|h| self.vals[h.0].data());
                    let ud = u.map(|h| self.vals[h.0].data());
                    for i in 0..n {
                        let t = wd[i] / meta.step;
                        // gate on the straight-through surrogate's pre-clip value
                        let pre = match mode {
                            WeightRounding::Nearest => t,
                            WeightRounding::FloorSign => {
                                let vi = vd.unwrap()[i];
                                let r = if soft {
                                    rect_sigmoid(vi)
                                } else {
                                    round_up_indicator(vi)
                                };
                                t.floor() + r
                            }
                            WeightRounding::FloorSignOffset => {
                                let vi = vd.unwrap()[i];
                                let ui = ud.unwrap()[i];
                                t.floor() + round_up_indicator(vi) + ui / meta.step
                            }
                        } + meta.zero;
                        let inside = pre > meta.qmin && pre < meta.qmax;
                        if !inside {
                            continue;
                        }
                        let gi = g.data()[i];
                        if let Some(dw) = dw.as_mut() {
                            dw[i] = gi;
                        }
                        if let Some(dv) = dv.as_mut() {
                            if mode == WeightRounding::FloorSign {
                                dv[i] = gi * meta.step * rect_sigmoid_deriv(vd.unwrap()[i]);
                            }
                        }
                        if let Some(du) = du.as_mut() {
                            du[i] = gi;
                        }
                    }
                }
                if let Some(dw) = dw {
                    self.acc(w, Tensor::new(sw.clone(), dw)?);
                }
                if let (Some(h), Some(dv)) = (v, dv) {
                    self.acc(h, Tensor::new(sw.clone(), dv)?);
                }
                if let (Some(h), Some(du)) = (u, du) {
                    self.acc(h, Tensor::new(sw, du)?);
                }
                Ok(())
            }
            Node::FqAct {
                x,
                s,
                zero,
                qmin,
                qmax,
                soft,
            } => {
                let (x, s, zero, qmin, qmax, soft) = (*x, *s, *zero, *qmin, *qmax, *soft);
                let sv = self.vals[s.0].data()[0];
                let n = self.vals[x.0].numel();
                let mut dx = if self.needs(x) {
                    Some(vec![0.0f32; n])
                } else {
                    None
                };
                let mut ds = 0.0f64;
                let want_ds = self.needs(s);
                {
                    let xd = self.vals[x.0].data();
                    for i in 0..n {
                        let t = xd[i] / sv + zero;
                        let gi = g.data()[i];
                        if t <= qmin {
                            if want_ds {
                                ds += gi as f64 * (qmin - zero) as f64;
                            }
                        } else if t >= qmax {
                            if want_ds {
                                ds += gi as f64 * (qmax - zero) as f64;
                            }
                        } else {
                            if let Some(dx) = dx.as_mut() {
                                dx[i] = gi;
                            }
                            if want_ds && !soft {
                                let r = (xd[i] / sv).round();
                                ds += gi as f64 * (r - xd[i] / sv) as f64;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    let sx = self.vals[x.0].shape().to_vec();
                    self.acc(x, Tensor::new(sx, dx)?);
                }
                if want_ds {
                    self.acc(s, Tensor::scalar(ds as f32));
                }
                Ok(())
            }
            Node::RoundReg { v, beta } => {
                let (v, beta) = (*v, *beta);
                let gs = g.data()[0];
                let dv: Vec<f32> = self.vals[v.0]
                    .data()
                    .iter()
                    .map(|&vi| {
                        let h = rect_sigmoid(vi);
                        let t = 2.0 * h - 1.0;
                        if t == 0.0 {
                            0.0
                        } else {
                            let d = -(beta)
                                * t.abs().powf(beta - 1.0)
                                * t.signum()
                                * 2.0
                                * rect_sigmoid_deriv(vi);
                            gs * d
                        }
                    })
                    .collect();
                let sv = self.vals[v.0].shape().to_vec();
                self.acc(v, Tensor::new(sv, dv)?);
                Ok(())
            }
        }
    }
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C0: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C1: f32 = 0.044715;

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_deriv(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    if perm.len() != shape.len() {
        return Err(Error::contract(format!(
            "permute {perm:?} does not match rank of {shape:?}"
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::contract(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides_for_in = vec![0usize; rank];
    {
        let mut out_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
        }
        for (oi, &p) in perm.iter().enumerate() {
            out_strides_for_in[p] = out_strides[oi];
        }
    }
    let mut out = vec![0.0f32; t.numel()];
    let mut idx = vec![0usize; rank];
    let mut out_off = 0usize;
    for &v in t.data() {
        out[out_off] = v;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out_off += out_strides_for_in[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out_off -= out_strides_for_in[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::rng::Rng;

    #[test]
    fn matmul_identity_and_zeros() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul(eye, b, false).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::full(&[3, 4], 3.5));
        let zy = tape.matmul(z, any, false).unwrap();
        assert_eq!(tape.value(zy).shape(), &[2, 4]);
        assert!(tape.value(zy).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul(a, b, false).unwrap();
        assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones_and_unused_leaf_is_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let unused = tape.leaf(Tensor::zeros(&[2]), true);
        let ones = Tensor::full(&[3], 1.0);
        let loss = tape.weighted_sum(w, &ones).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn norm_squared_gradient() {
        // loss = ||w||^2 at w=[1,-2] -> grad [2,-4]
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let m = tape.mse(w, zeros).unwrap(); // mean (w)^2 = ||w||^2 / 2
        let loss = tape.scale(m, 2.0).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ce_non_negative() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let mut data = vec![0.0f32; 12];
        rng.fill_uniform(&mut data, -5.0, 5.0);
        let x = tape.constant(Tensor::from_vec(&[3, 4], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks_exact(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let ce = tape.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!(tape.value(ce).data()[0] >= 0.0);
    }

    #[test]
    fn batch_norm_train_hand_example() {
        // x = [1,3] in one channel (B=2, H=W=1): mean 2, biased std 1, out [-1,1]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let (mean, var) = tape.bn_batch_stats(y).unwrap();
        assert!((mean[0] - 2.0).abs() < 1e-6);
        assert!((var[0] - 1.0).abs() < 1e-6);
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_centering() {
        // constant input per channel with matching running mean -> zeros
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.25));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape
            .batch_norm_eval(x, g, b, &[3.25], &[1.0], 1e-5)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        // pre-affine output: per-channel mean ~ 0, biased variance ~ 1
        let mut rng = Rng::new(17);
        let mut x = Tensor::zeros(&[4, 3, 5, 5]);
        rng.fill_uniform(x.data_mut(), -3.0, 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.batch_norm_train(xv, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        let (c, hw, batch) = (3, 25, 4);
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for bi in 0..batch {
                let off = (bi * c + ci) * hw;
                for k in 0..hw {
                    let v = out.data()[off + k] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let m = (batch * hw) as f64;
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() <= 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn batch_norm_train_rejects_single_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = Rng::new(2);
        let mut data = vec![0.0f32; 24];
        rng.fill_uniform(&mut data, -1.0, 1.0);
        let t = Tensor::from_vec(&[2, 3, 4], data).unwrap();
        let p = permute_tensor(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_tensor(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn fq_weight_rejects_bad_step() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[2]));
        let meta = FqMeta {
            step: 0.0,
            zero: 0.0,
            qmin: 0.0,
            qmax: 15.0,
        };
        assert!(matches!(
            tape.fq_weight(w, None, None, meta, WeightRounding::Nearest, false),
            Err(Error::QuantParam(_))
        ));
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(3);
        let mut data = vec![0.0f32; 8];
        rng.fill_uniform(&mut data, -2.0, 2.0);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[2, 4], data.clone()).unwrap());
            let r = tape.relu(x).unwrap();
            let s = tape.softmax(r).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
