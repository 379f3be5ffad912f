//! The two desk-scale architectures and their tape-based forward passes.
//!
//! `tiny-cnn`: four conv-BN-ReLU blocks (channels 16/32/64/64) + global
//! average pool + linear head on 3x32x32 inputs, 10 classes.
//! `tiny-vit`: patch size 4 on 32x32 input (64 patches + class token),
//! 4 heads, embed dim 64, 4 pre-norm transformer blocks, layer norm, no BN.
//!
//! A [`ForwardPolicy`] hooks every conv/linear weight and every activation
//! quantization site, so the same forward code serves float inference,
//! fake-quantized evaluation, and QAT training.

use crate::error::{Error, Result};
use crate::nnkit::rng::Rng;
use crate::nnkit::tape::{Tape, Val};
use crate::nnkit::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;
pub const LN_EPS: f32 = 1e-5;
pub const IMG_SIZE: usize = 32;
pub const IMG_CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;

const CNN_CHANNELS: [usize; 4] = [16, 32, 64, 64];
const CNN_STRIDES: [usize; 4] = [2, 2, 2, 1];

const VIT_EMBED: usize = 64;
const VIT_HEADS: usize = 4;
const VIT_BLOCKS: usize = 4;
const VIT_MLP_HIDDEN: usize = 128;
const VIT_PATCH: usize = 4;
const VIT_GRID: usize = IMG_SIZE / VIT_PATCH; // 8
pub const VIT_PATCH_TOKENS: usize = VIT_GRID * VIT_GRID; // 64
const VIT_TOKENS: usize = VIT_PATCH_TOKENS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    TinyCnn,
    TinyVit,
}

impl Arch {
    pub fn tag(&self) -> u8 {
        match self {
            Arch::TinyCnn => 0,
            Arch::TinyVit => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Arch> {
        match tag {
            0 => Ok(Arch::TinyCnn),
            1 => Ok(Arch::TinyVit),
            other => Err(Error::format(format!("unknown architecture tag {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::TinyCnn => "tiny-cnn",
            Arch::TinyVit => "tiny-vit",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "tiny-cnn" => Ok(Arch::TinyCnn),
            "tiny-vit" => Ok(Arch::TinyVit),
            other => Err(Error::contract(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Running statistics of one BatchNorm layer. Running variance is stored
/// unbiased and kept strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub params: Vec<Param>,
    pub bn: Vec<BnState>,
}

/// Train uses batch statistics in BatchNorm; Eval uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hooks applied to every conv/linear weight and activation-quantization
/// site during a forward pass. The default is the float path.
pub trait ForwardPolicy {
    fn weight(&self, _tape: &mut Tape, _widx: usize, w: Val) -> Result<Val> {
        Ok(w)
    }
    fn activation(&self, _tape: &mut Tape, _site: usize, x: Val) -> Result<Val> {
        Ok(x)
    }
}

/// Identity policy: plain float forward.
pub struct FloatPolicy;

impl ForwardPolicy for FloatPolicy {}

/// Capture-and-stop point inside a forward pass, indexed by reconstruction
/// block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapPoint {
    /// Value entering block `k` (after any preceding activation quantizers).
    BlockInput(usize),
    /// Value produced by block `k` (conv/linear output, or transformer block
    /// output).
    BlockOutput(usize),
}

/// Per-image first and second moments of the input to each BatchNorm layer,
/// accumulated in f64. `sum[b * channels + c]` aggregates over H*W.
#[derive(Debug, Clone)]
pub struct BnMoments {
    pub batch: usize,
    pub channels: usize,
    pub values_per_image: usize,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

pub struct RunCfg<'a> {
    pub mode: Mode,
    pub policy: &'a dyn ForwardPolicy,
    pub params_require_grad: bool,
    pub observe_bn: bool,
    pub capture_patches: bool,
    pub tap: Option<TapPoint>,
}

impl<'a> RunCfg<'a> {
    pub fn eval(policy: &'a dyn ForwardPolicy) -> Self {
        RunCfg {
            mode: Mode::Eval,
            policy,
            params_require_grad: false,
            observe_bn: false,
            capture_patches: false,
            tap: None,
        }
    }

    pub fn train(policy: &'a dyn ForwardPolicy) -> Self {
        RunCfg {
            mode: Mode::Train,
            params_require_grad: true,
            ..RunCfg::eval(policy)
        }
    }
}

pub struct RunOut {
    /// Class logits; absent when a tap stopped the forward early.
    pub logits: Option<Val>,
    /// Tape handles of the parameter leaves, aligned with `model.params`.
    pub param_vals: Vec<Val>,
    /// Train-mode BatchNorm outputs, for running-statistics updates.
    pub bn_nodes: Vec<Val>,
    /// Observed BatchNorm-input moments, one entry per BN layer.
    pub bn_moments: Vec<BnMoments>,
    /// Final-block patch features (class token excluded), one `[64,64]`
    /// tensor per image.
    pub patches: Vec<Tensor>,
    /// Captured tap tensor.
    pub tap: Option<Tensor>,
}

impl Model {
    /// He-uniform fan-in initialization, deterministic in the seed.
    pub fn new(arch: Arch, seed: u64) -> Model {
        let rng = Rng::new(seed).split(0x6d6f64656c); // "model"
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut idx = 0u64;
        let add = |name: &str, shape: &[usize], init: Init, rng: &Rng, idx: &mut u64| {
            let mut r = rng.split(*idx);
            *idx += 1;
            let mut t = Tensor::zeros(shape);
            match init {
                Init::HeUniform(fan_in) => {
                    let limit = (6.0 / fan_in as f32).sqrt();
                    r.fill_uniform(t.data_mut(), -limit, limit);
                }
                Init::Uniform(limit) => r.fill_uniform(t.data_mut(), -limit, limit),
                Init::Zero => {}
                Init::One => t.data_mut().fill(1.0),
            }
            Param {
                name: name.to_string(),
                tensor: t,
            }
        };
        match arch {
            Arch::TinyCnn => {
                let mut in_ch = IMG_CHANNELS;
                for (k, &out_ch) in CNN_CHANNELS.iter().enumerate() {
                    let fan_in = in_ch * 9;
                    params.push(add(
                        &format!("conv{}.weight", k + 1),
                        &[out_ch, in_ch, 3, 3],
                        Init::HeUniform(fan_in),
                        &rng,
                        &mut idx,
                    ));
                    params.push(add(
                        &format!("conv{}.bias", k + 1),
                        &[out_ch],
                        Init::Zero,
                        &rng,
                        &mut idx,
                    ));
                    params.push(add(
                        &format!("bn{}.gamma", k + 1),
                        &[out_ch],
                        Init::One,
                        &rng,
                        &mut idx,
                    ));
                    params.push(add(
                        &format!("bn{}.beta", k + 1),
                        &[out_ch],
                        Init::Zero,
                        &rng,
                        &mut idx,
                    ));
                    bn.push(BnState {
                        running_mean: vec![0.0; out_ch],
                        running_var: vec![1.0; out_ch],
                    });
                    in_ch = out_ch;
                }
                params.push(add(
                    "head.weight",
                    &[NUM_CLASSES, 64],
                    Init::HeUniform(64),
                    &rng,
                    &mut idx,
                ));
                params.push(add("head.bias", &[NUM_CLASSES], Init::Zero, &rng, &mut idx));
            }
            Arch::TinyVit => {
                let d = VIT_EMBED;
                params.push(add(
                    "patch.weight",
                    &[d, IMG_CHANNELS, VIT_PATCH, VIT_PATCH],
                    Init::HeUniform(IMG_CHANNELS * VIT_PATCH * VIT_PATCH),
                    &rng,
                    &mut idx,
                ));
                params.push(add("patch.bias", &[d], Init::Zero, &rng, &mut idx));
                params.push(add("cls", &[1, d], Init::Uniform(0.02), &rng, &mut idx));
                params.push(add(
                    "pos",
                    &[VIT_TOKENS, d],
                    Init::Uniform(0.02),
                    &rng,
                    &mut idx,
                ));
                for i in 0..VIT_BLOCKS {
                    let p = |s: &str| format!("blk{i}.{s}");
                    params.push(add(&p("ln1.gamma"), &[d], Init::One, &rng, &mut idx));
                    params.push(add(&p("ln1.beta"), &[d], Init::Zero, &rng, &mut idx));
                    for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                        params.push(add(&p(w), &[d, d], Init::HeUniform(d), &rng, &mut idx));
                        let b = w.replace('w', "b");
                        params.push(add(&p(&b), &[d], Init::Zero, &rng, &mut idx));
                    }
                    params.push(add(&p("ln2.gamma"), &[d], Init::One, &rng, &mut idx));
                    params.push(add(&p("ln2.beta"), &[d], Init::Zero, &rng, &mut idx));
                    params.push(add(
                        &p("mlp.w1"),
                        &[VIT_MLP_HIDDEN, d],
                        Init::HeUniform(d),
                        &rng,
                        &mut idx,
                    ));
                    params.push(add(
                        &p("mlp.b1"),
                        &[VIT_MLP_HIDDEN],
                        Init::Zero,
                        &rng,
                        &mut idx,
                    ));
                    params.push(add(
                        &p("mlp.w2"),
                        &[d, VIT_MLP_HIDDEN],
                        Init::HeUniform(VIT_MLP_HIDDEN),
                        &rng,
                        &mut idx,
                    ));
                    params.push(add(&p("mlp.b2"), &[d], Init::Zero, &rng, &mut idx));
                }
                params.push(add("ln_f.gamma", &[d], Init::One, &rng, &mut idx));
                params.push(add("ln_f.beta", &[d], Init::Zero, &rng, &mut idx));
                params.push(add(
                    "head.weight",
                    &[NUM_CLASSES, d],
                    Init::HeUniform(d),
                    &rng,
                    &mut idx,
                ));
                params.push(add("head.bias", &[NUM_CLASSES], Init::Zero, &rng, &mut idx));
            }
        }
        Model { arch, params, bn }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn has_bn(&self) -> bool {
        !self.bn.is_empty()
    }

    /// Indices into `params` of the conv/linear weight tensors, in forward
    /// order. This is the weight-quantization inventory.
    pub fn weight_param_indices(&self) -> Vec<usize> {
        match self.arch {
            Arch::TinyCnn => {
                let mut v: Vec<usize> = (1..=4)
                    .map(|k| self.param_index(&format!("conv{k}.weight")))
                    .collect();
                v.push(self.param_index("head.weight"));
                v
            }
            Arch::TinyVit => {
                let mut v = vec![self.param_index("patch.weight")];
                for i in 0..VIT_BLOCKS {
                    for w in [
                        "attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2",
                    ] {
                        v.push(self.param_index(&format!("blk{i}.{w}")));
                    }
                }
                v.push(self.param_index("head.weight"));
                v
            }
        }
    }

    /// Number of activation fake-quantization sites: outputs of every
    /// ReLU/GELU and of the attention softmax-value product, plus the
    /// classifier-head input.
    pub fn num_act_sites(&self) -> usize {
        match self.arch {
            Arch::TinyCnn => 5,
            Arch::TinyVit => 2 * VIT_BLOCKS + 1,
        }
    }

    /// Activation sites whose values are non-negative by construction
    /// (post-ReLU); their zero-point is pinned to the lower bound.
    pub fn act_site_non_negative(&self, site: usize) -> bool {
        match self.arch {
            Arch::TinyCnn => site < 4, // ReLU outputs; pooled input can only be >= 0 too
            Arch::TinyVit => false,
        }
    }

    /// Reconstruction blocks: per conv/linear layer for the CNN, per
    /// transformer block for the ViT (patch embed and head are their own
    /// blocks).
    pub fn num_blocks(&self) -> usize {
        match self.arch {
            Arch::TinyCnn => 5,
            Arch::TinyVit => VIT_BLOCKS + 2,
        }
    }

    /// Weight-inventory indices owned by a reconstruction block.
    pub fn block_weight_indices(&self, block: usize) -> Vec<usize> {
        match self.arch {
            Arch::TinyCnn => vec![block],
            Arch::TinyVit => {
                if block == 0 {
                    vec![0]
                } else if block <= VIT_BLOCKS {
                    let base = 1 + 6 * (block - 1);
                    (base..base + 6).collect()
                } else {
                    vec![1 + 6 * VIT_BLOCKS]
                }
            }
        }
    }

    /// Update one BN layer's running statistics from observed batch
    /// statistics (biased variance in, unbiased stored).
    pub fn update_bn_running(&mut self, layer: usize, mean: &[f32], var_biased: &[f32], m: usize) {
        let state = &mut self.bn[layer];
        let unbias = m as f32 / (m as f32 - 1.0);
        for c in 0..state.running_mean.len() {
            state.running_mean[c] =
                (1.0 - BN_MOMENTUM) * state.running_mean[c] + BN_MOMENTUM * mean[c];
            state.running_var[c] = ((1.0 - BN_MOMENTUM) * state.running_var[c]
                + BN_MOMENTUM * var_biased[c] * unbias)
                .max(1e-12);
        }
    }

    /// Run the model on a batch of images `[B,3,32,32]`.
    pub fn run(&self, tape: &mut Tape, images: &Tensor, cfg: &RunCfg) -> Result<RunOut> {
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != IMG_CHANNELS
            || shape[2] != IMG_SIZE
            || shape[3] != IMG_SIZE
        {
            return Err(Error::contract(format!(
                "model input must be [B,{IMG_CHANNELS},{IMG_SIZE},{IMG_SIZE}], got {shape:?}"
            )));
        }
        let x = tape.leaf(images.clone(), false);
        let param_vals: Vec<Val> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), cfg.params_require_grad))
            .collect();
        let mut out = RunOut {
            logits: None,
            param_vals,
            bn_nodes: Vec::new(),
            bn_moments: Vec::new(),
            patches: Vec::new(),
            tap: None,
        };
        match self.arch {
            Arch::TinyCnn => self.run_cnn(tape, x, cfg, &mut out)?,
            Arch::TinyVit => self.run_vit(tape, x, cfg, &mut out)?,
        }
        Ok(out)
    }

    fn run_cnn(&self, tape: &mut Tape, x: Val, cfg: &RunCfg, out: &mut RunOut) -> Result<()> {
        let mut h = x;
        for k in 0..4 {
            if self.capture(tape, cfg, out, TapPoint::BlockInput(k), h) {
                return Ok(());
            }
            let conv = self.conv_block(tape, k, h, cfg.policy, &out.param_vals)?;
            if cfg.observe_bn {
                out.bn_moments.push(bn_moments_of(tape.value(conv)));
            }
            if self.capture(tape, cfg, out, TapPoint::BlockOutput(k), conv) {
                return Ok(());
            }
            let gamma = out.param_vals[self.param_index(&format!("bn{}.gamma", k + 1))];
            let beta = out.param_vals[self.param_index(&format!("bn{}.beta", k + 1))];
            let bn = match cfg.mode {
                Mode::Train => {
                    let y = tape.batch_norm_train(conv, gamma, beta, BN_EPS)?;
                    out.bn_nodes.push(y);
                    y
                }
                Mode::Eval => tape.batch_norm_eval(
                    conv,
                    gamma,
                    beta,
                    &self.bn[k].running_mean,
                    &self.bn[k].running_var,
                    BN_EPS,
                )?,
            };
            let act = tape.relu(bn)?;
            h = cfg.policy.activation(tape, k, act)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let pooled = cfg.policy.activation(tape, 4, pooled)?;
        if self.capture(tape, cfg, out, TapPoint::BlockInput(4), pooled) {
            return Ok(());
        }
        let logits = self.linear(tape, "head", 4, pooled, cfg.policy, &out.param_vals)?;
        if self.capture(tape, cfg, out, TapPoint::BlockOutput(4), logits) {
            return Ok(());
        }
        out.logits = Some(logits);
        Ok(())
    }

    fn run_vit(&self, tape: &mut Tape, x: Val, cfg: &RunCfg, out: &mut RunOut) -> Result<()> {
        if self.capture(tape, cfg, out, TapPoint::BlockInput(0), x) {
            return Ok(());
        }
        let pe = self.patch_embed(tape, x, cfg.policy, &out.param_vals)?;
        if self.capture(tape, cfg, out, TapPoint::BlockOutput(0), pe) {
            return Ok(());
        }
        let b = tape.value(pe).shape()[0];
        let grid = tape.reshape(pe, &[b, VIT_EMBED, VIT_PATCH_TOKENS])?;
        let tokens = tape.permute(grid, &[0, 2, 1])?;
        let cls = out.param_vals[self.param_index("cls")];
        let pos = out.param_vals[self.param_index("pos")];
        let mut tokens = tape.concat_cls(cls, tokens)?;
        tokens = tape.add_pos(tokens, pos)?;
        for i in 0..VIT_BLOCKS {
            if self.capture(tape, cfg, out, TapPoint::BlockInput(i + 1), tokens) {
                return Ok(());
            }
            tokens = self.transformer_block(tape, i, tokens, cfg.policy, &out.param_vals)?;
            if i == VIT_BLOCKS - 1 && cfg.capture_patches {
                out.patches = split_patch_features(tape.value(tokens))?;
            }
            if self.capture(tape, cfg, out, TapPoint::BlockOutput(i + 1), tokens) {
                return Ok(());
            }
        }
        let gamma = out.param_vals[self.param_index("ln_f.gamma")];
        let beta = out.param_vals[self.param_index("ln_f.beta")];
        let normed = tape.layer_norm(tokens, gamma, beta, LN_EPS)?;
        let cls_feat = tape.select_token(normed, 0)?;
        let cls_feat = cfg.policy.activation(tape, 2 * VIT_BLOCKS, cls_feat)?;
        if self.capture(
            tape,
            cfg,
            out,
            TapPoint::BlockInput(VIT_BLOCKS + 1),
            cls_feat,
        ) {
            return Ok(());
        }
        let widx = 1 + 6 * VIT_BLOCKS;
        let logits = self.linear(tape, "head", widx, cls_feat, cfg.policy, &out.param_vals)?;
        if self.capture(
            tape,
            cfg,
            out,
            TapPoint::BlockOutput(VIT_BLOCKS + 1),
            logits,
        ) {
            return Ok(());
        }
        out.logits = Some(logits);
        Ok(())
    }

    fn capture(
        &self,
        tape: &Tape,
        cfg: &RunCfg,
        out: &mut RunOut,
        point: TapPoint,
        v: Val,
    ) -> bool {
        if cfg.tap == Some(point) {
            out.tap = Some(tape.value(v).clone());
            true
        } else {
            false
        }
    }

    /// Conv + bias of CNN block `k` (the reconstruction unit; BN and ReLU
    /// are applied by the caller).
    pub fn conv_block(
        &self,
        tape: &mut Tape,
        k: usize,
        x: Val,
        policy: &dyn ForwardPolicy,
        param_vals: &[Val],
    ) -> Result<Val> {
        let w = param_vals[self.param_index(&format!("conv{}.weight", k + 1))];
        let w = policy.weight(tape, k, w)?;
        let bias = param_vals[self.param_index(&format!("conv{}.bias", k + 1))];
        let y = tape.conv2d(x, w, CNN_STRIDES[k], 1)?;
        tape.add_bias_channel(y, bias)
    }

    /// Patch-embedding conv + bias (ViT reconstruction block 0).
    pub fn patch_embed(
        &self,
        tape: &mut Tape,
        x: Val,
        policy: &dyn ForwardPolicy,
        param_vals: &[Val],
    ) -> Result<Val> {
        let w = param_vals[self.param_index("patch.weight")];
        let w = policy.weight(tape, 0, w)?;
        let bias = param_vals[self.param_index("patch.bias")];
        let y = tape.conv2d(x, w, VIT_PATCH, 0)?;
        tape.add_bias_channel(y, bias)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        prefix: &str,
        widx: usize,
        x: Val,
        policy: &dyn ForwardPolicy,
        param_vals: &[Val],
    ) -> Result<Val> {
        let w = param_vals[self.param_index(&format!("{prefix}.weight"))];
        let w = policy.weight(tape, widx, w)?;
        let b = param_vals[self.param_index(&format!("{prefix}.bias"))];
        let y = tape.matmul(x, w, true)?;
        tape.add_bias_row(y, b)
    }

    fn named_linear(
        &self,
        tape: &mut Tape,
        wname: &str,
        bname: &str,
        widx: usize,
        x: Val,
        policy: &dyn ForwardPolicy,
        param_vals: &[Val],
    ) -> Result<Val> {
        let w = param_vals[self.param_index(wname)];
        let w = policy.weight(tape, widx, w)?;
        let b = param_vals[self.param_index(bname)];
        let y = tape.matmul(x, w, true)?;
        tape.add_bias_row(y, b)
    }

    /// One pre-norm transformer block (ViT reconstruction block `i + 1`).
    pub fn transformer_block(
        &self,
        tape: &mut Tape,
        i: usize,
        tokens: Val,
        policy: &dyn ForwardPolicy,
        param_vals: &[Val],
    ) -> Result<Val> {
        let shape = tape.value(tokens).shape().to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = VIT_HEADS;
        let dh = d / heads;
        let widx_base = 1 + 6 * i;
        let p = |s: &str| format!("blk{i}.{s}");

        let g1 = param_vals[self.param_index(&p("ln1.gamma"))];
        let b1 = param_vals[self.param_index(&p("ln1.beta"))];
        let h = tape.layer_norm(tokens, g1, b1, LN_EPS)?;
        let flat = tape.reshape(h, &[b * t, d])?;
        let q = self.named_linear(
            tape,
            &p("attn.wq"),
            &p("attn.bq"),
            widx_base,
            flat,
            policy,
            param_vals,
        )?;
        let k = self.named_linear(
            tape,
            &p("attn.wk"),
            &p("attn.bk"),
            widx_base + 1,
            flat,
            policy,
            param_vals,
        )?;
        let v = self.named_linear(
            tape,
            &p("attn.wv"),
            &p("attn.bv"),
            widx_base + 2,
            flat,
            policy,
            param_vals,
        )?;
        let split = |tape: &mut Tape, x: Val| -> Result<Val> {
            let x = tape.reshape(x, &[b, t, heads, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * heads, t, dh])
        };
        let qh = split(tape, q)?;
        let kh = split(tape, k)?;
        let vh = split(tape, v)?;
        let scores = tape.batch_matmul(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(attn, vh, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t, d])?;
        let ctx = policy.activation(tape, 2 * i, ctx)?;
        let o = self.named_linear(
            tape,
            &p("attn.wo"),
            &p("attn.bo"),
            widx_base + 3,
            ctx,
            policy,
            param_vals,
        )?;
        let o = tape.reshape(o, &[b, t, d])?;
        let tokens = tape.add(tokens, o)?;

        let g2 = param_vals[self.param_index(&p("ln2.gamma"))];
        let b2 = param_vals[self.param_index(&p("ln2.beta"))];
        let h2 = tape.layer_norm(tokens, g2, b2, LN_EPS)?;
        let flat2 = tape.reshape(h2, &[b * t, d])?;
        let m = self.named_linear(
            tape,
            &p("mlp.w1"),
            &p("mlp.b1"),
            widx_base + 4,
            flat2,
            policy,
            param_vals,
        )?;
        let m = tape.gelu(m)?;
        let m = policy.activation(tape, 2 * i + 1, m)?;
        let m = self.named_linear(
            tape,
            &p("mlp.w2"),
            &p("mlp.b2"),
            widx_base + 5,
            m,
            policy,
            param_vals,
        )?;
        let m = tape.reshape(m, &[b, t, d])?;
        tape.add(tokens, m)
    }

    /// Run a single reconstruction block on a prepared input value.
    pub fn run_block(
        &self,
        tape: &mut Tape,
        block: usize,
        x: Val,
        policy: &dyn ForwardPolicy,
    ) -> Result<Val> {
        let param_vals: Vec<Val> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), false))
            .collect();
        match self.arch {
            Arch::TinyCnn => {
                if block < 4 {
                    self.conv_block(tape, block, x, policy, &param_vals)
                } else {
                    self.linear(tape, "head", 4, x, policy, &param_vals)
                }
            }
            Arch::TinyVit => {
                if block == 0 {
                    self.patch_embed(tape, x, policy, &param_vals)
                } else if block <= VIT_BLOCKS {
                    self.transformer_block(tape, block - 1, x, policy, &param_vals)
                } else {
                    self.linear(tape, "head", 1 + 6 * VIT_BLOCKS, x, policy, &param_vals)
                }
            }
        }
    }
}

enum Init {
    HeUniform(usize),
    Uniform(f32),
    Zero,
    One,
}

fn bn_moments_of(x: &Tensor) -> BnMoments {
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut sum = vec![0.0f64; b * c];
    let mut sumsq = vec![0.0f64; b * c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let mut s0 = 0.0f64;
            let mut s1 = 0.0f64;
            for &v in plane {
                let v = v as f64;
                s0 += v;
                s1 += v * v;
            }
            sum[bi * c + ci] = s0;
            sumsq[bi * c + ci] = s1;
        }
    }
    BnMoments {
        batch: b,
        channels: c,
        values_per_image: hw,
        sum,
        sumsq,
    }
}

fn split_patch_features(tokens: &Tensor) -> Result<Vec<Tensor>> {
    let s = tokens.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let start = (bi * t + 1) * d;
        let data = tokens.data()[start..start + (t - 1) * d].to_vec();
        out.push(Tensor::new(vec![t - 1, d], data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_has_bn_vit_does_not() {
        let cnn = Model::new(Arch::TinyCnn, 1);
        let vit = Model::new(Arch::TinyVit, 1);
        assert!(cnn.bn.len() >= 2);
        assert!(vit.bn.is_empty());
        assert!(cnn.has_bn() && !vit.has_bn());
    }

    #[test]
    fn weight_inventories() {
        let cnn = Model::new(Arch::TinyCnn, 1);
        assert_eq!(cnn.weight_param_indices().len(), 5);
        assert_eq!(cnn.num_act_sites(), 5);
        assert_eq!(cnn.num_blocks(), 5);
        let vit = Model::new(Arch::TinyVit, 1);
        assert_eq!(vit.weight_param_indices().len(), 26);
        assert_eq!(vit.num_act_sites(), 9);
        assert_eq!(vit.num_blocks(), 6);
        assert_eq!(vit.block_weight_indices(1), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(vit.block_weight_indices(5), vec![25]);
    }

    #[test]
    fn forward_shapes_and_purity() {
        for arch in [Arch::TinyCnn, Arch::TinyVit] {
            let model = Model::new(arch, 3);
            let mut rng = Rng::new(7);
            let mut imgs = Tensor::zeros(&[2, 3, 32, 32]);
            rng.fill_uniform(imgs.data_mut(), 0.0, 1.0);
            let run = || {
                let mut tape = Tape::new();
                let out = model
                    .run(&mut tape, &imgs, &RunCfg::eval(&FloatPolicy))
                    .unwrap();
                tape.value(out.logits.unwrap()).clone()
            };
            let a = run();
            let b = run();
            assert_eq!(a.shape(), &[2, NUM_CLASSES]);
            assert_eq!(a, b);
            assert!(a.all_finite());
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::new(Arch::TinyCnn, 42);
        let b = Model::new(Arch::TinyCnn, 42);
        assert_eq!(a, b);
        let c = Model::new(Arch::TinyCnn, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn bn_observation_and_patch_capture() {
        let cnn = Model::new(Arch::TinyCnn, 1);
        let mut rng = Rng::new(9);
        let mut imgs = Tensor::zeros(&[3, 3, 32, 32]);
        rng.fill_uniform(imgs.data_mut(), 0.0, 1.0);
        let mut tape = Tape::new();
        let mut cfg = RunCfg::eval(&FloatPolicy);
        cfg.observe_bn = true;
        let out = cnn.run(&mut tape, &imgs, &cfg).unwrap();
        assert_eq!(out.bn_moments.len(), 4);
        assert_eq!(out.bn_moments[0].batch, 3);
        assert_eq!(out.bn_moments[0].channels, 16);

        let vit = Model::new(Arch::TinyVit, 1);
        let mut tape = Tape::new();
        let mut cfg = RunCfg::eval(&FloatPolicy);
        cfg.capture_patches = true;
        let out = vit.run(&mut tape, &imgs, &cfg).unwrap();
        assert_eq!(out.patches.len(), 3);
        assert_eq!(out.patches[0].shape(), &[VIT_PATCH_TOKENS, VIT_EMBED]);
    }

    #[test]
    fn taps_stop_forward() {
        let cnn = Model::new(Arch::TinyCnn, 1);
        let imgs = Tensor::full(&[1, 3, 32, 32], 0.5);
        let mut tape = Tape::new();
        let mut cfg = RunCfg::eval(&FloatPolicy);
        cfg.tap = Some(TapPoint::BlockInput(2));
        let out = cnn.run(&mut tape, &imgs, &cfg).unwrap();
        assert!(out.logits.is_none());
        let tap = out.tap.unwrap();
        assert_eq!(tap.shape(), &[1, 32, 8, 8]);
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        // rebuild block 0's score path with the real projections and check
        // the softmax rows
        let vit = Model::new(Arch::TinyVit, 5);
        let mut rng = Rng::new(11);
        let mut toks = Tensor::zeros(&[2, VIT_TOKENS, VIT_EMBED]);
        rng.fill_uniform(toks.data_mut(), -1.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(toks.clone(), false);
        let y = vit.run_block(&mut tape, 1, x, &FloatPolicy).unwrap();
        assert!(tape.value(y).all_finite());

        let mut tape = Tape::new();
        let (b, t, d, heads) = (2, VIT_TOKENS, VIT_EMBED, VIT_HEADS);
        let dh = d / heads;
        let x = tape.leaf(toks, false);
        let g1 = tape.constant(vit.param("blk0.ln1.gamma").unwrap().clone());
        let b1 = tape.constant(vit.param("blk0.ln1.beta").unwrap().clone());
        let h = tape.layer_norm(x, g1, b1, LN_EPS).unwrap();
        let flat = tape.reshape(h, &[b * t, d]).unwrap();
        let project = |wname: &str, bname: &str, tape: &mut Tape| {
            let w = tape.constant(vit.param(wname).unwrap().clone());
            let bias = tape.constant(vit.param(bname).unwrap().clone());
            let y = tape.matmul(flat, w, true).unwrap();
            let y = tape.add_bias_row(y, bias).unwrap();
            let y = tape.reshape(y, &[b, t, heads, dh]).unwrap();
            let y = tape.permute(y, &[0, 2, 1, 3]).unwrap();
            tape.reshape(y, &[b * heads, t, dh]).unwrap()
        };
        let q = project("blk0.attn.wq", "blk0.attn.bq", &mut tape);
        let k = project("blk0.attn.wk", "blk0.attn.bk", &mut tape);
        let scores = tape.batch_matmul(q, k, true).unwrap();
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt()).unwrap();
        let attn = tape.softmax(scores).unwrap();
        for row in tape.value(attn).data().chunks_exact(t) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "attention row sums to {s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
