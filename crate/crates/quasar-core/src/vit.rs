//! A self-contained toy vision-transformer encoder with hand-written forward
//! and backward passes.
//!
//! Each encoder block computes
//!   x <- x + diag(sls_msa) * MSA(LN(x))
//!   x <- x + diag(sls_mlp) * MLP(LN(x))
//! with learnable per-channel scaling of both residual branches. GEMM
//! weights are fake-quantized row-wise (straight-through gradients); GEMM
//! inputs, attention scores, and attention-value operands are quantized to
//! the activation bit-width; softmax, GELU, and layer norm stay in real
//! arithmetic. Classification mean-pools the tokens and applies a linear
//! head. The patch embedding and the head stay full precision.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Dimension};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quantize, quantize_activations, PrecisionTag, QuantParams};

const LN_EPS: f64 = 1e-6;

/// How much of the quantization pipeline is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantKind {
    /// Real arithmetic everywhere.
    Off,
    /// Fake-quantized weights, real activations.
    WeightsOnly,
    /// Fake-quantized weights and quantized GEMM operands.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub hidden_dims: Vec<usize>,
    pub expansion_ratios: Vec<f64>,
    pub mixed_ratios: Vec<f64>,
    pub num_classes: usize,
    pub token_dim: usize,
    pub act_bits: u32,
    pub quant: QuantKind,
}

impl ToyModelConfig {
    pub fn mlp_hidden(&self, layer: usize) -> usize {
        (self.embed_dim as f64 * self.expansion_ratios[layer]).round() as usize
    }

    pub fn head_dim(&self, layer: usize) -> usize {
        self.hidden_dims[layer] / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.hidden_dims.len() != self.depth
            || self.expansion_ratios.len() != self.depth
            || self.mixed_ratios.len() != self.depth
        {
            return Err(Error::InvalidConfig(
                "per-layer lists must match depth".into(),
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("zero model dimension".into()));
        }
        for &h in &self.hidden_dims {
            if h % self.heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "hidden dim {h} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        QuantParams::with_act_bits(self.act_bits).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }
}

/// Weights of one encoder block, with per-row precision tags for every
/// quantized matrix. Latent values are full precision; quantization happens
/// on the fly in the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_qkv: Array2<f64>,
    pub w_proj: Array2<f64>,
    pub w_mlp1: Array2<f64>,
    pub w_mlp2: Array2<f64>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub sls_msa: Array1<f64>,
    pub sls_mlp: Array1<f64>,
    pub tags_qkv: Vec<PrecisionTag>,
    pub tags_proj: Vec<PrecisionTag>,
    pub tags_mlp1: Vec<PrecisionTag>,
    pub tags_mlp2: Vec<PrecisionTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_embed: Array2<f64>,
    pub blocks: Vec<EncoderParams>,
    pub head: Array2<f64>,
}

/// First round(ratio * rows) rows get the 8-bit tag, the rest 4-bit; matches
/// the window extraction order of the entangled supernet.
pub fn tags_for_rows(rows: usize, ratio_8bit: f64) -> Vec<PrecisionTag> {
    let w8 = (ratio_8bit * rows as f64).round() as usize;
    (0..rows)
        .map(|i| {
            if i < w8 {
                PrecisionTag::W8
            } else {
                PrecisionTag::W4
            }
        })
        .collect()
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        rng.sample::<f64, _>(StandardNormal) * std
    })
}

impl ModelParams {
    /// Random initialization: unit-variance patch projection, small encoder
    /// weights, residual-branch scaling at 0.1.
    pub fn init(config: &ToyModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let h = config.hidden_dims[l];
            let mh = config.mlp_hidden(l);
            let rho = config.mixed_ratios[l];
            let mut tags_qkv = Vec::with_capacity(3 * h);
            for _ in 0..3 {
                tags_qkv.extend(tags_for_rows(h, rho));
            }
            blocks.push(EncoderParams {
                w_qkv: randn(rng, 3 * h, e, 0.02),
                w_proj: randn(rng, e, h, 0.02),
                w_mlp1: randn(rng, mh, e, 0.02),
                w_mlp2: randn(rng, e, mh, 0.02),
                ln1: LayerNormParams::identity(e),
                ln2: LayerNormParams::identity(e),
                sls_msa: Array1::from_elem(e, 0.1),
                sls_mlp: Array1::from_elem(e, 0.1),
                tags_qkv,
                tags_proj: tags_for_rows(e, rho),
                tags_mlp1: tags_for_rows(mh, rho),
                tags_mlp2: tags_for_rows(e, rho),
            });
        }
        Ok(ModelParams {
            patch_embed: randn(rng, e, config.token_dim, 1.0 / (config.token_dim as f64).sqrt()),
            blocks,
            head: randn(rng, config.num_classes, e, 1.0 / (e as f64).sqrt()),
        })
    }

    /// Visits every parameter tensor as a named flat slice, in a fixed
    /// order shared with [`Gradients::for_each`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("patch_embed", self.patch_embed.as_slice_mut().unwrap());
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{l}.w_qkv"), b.w_qkv.as_slice_mut().unwrap());
            f(&format!("block{l}.w_proj"), b.w_proj.as_slice_mut().unwrap());
            f(&format!("block{l}.w_mlp1"), b.w_mlp1.as_slice_mut().unwrap());
            f(&format!("block{l}.w_mlp2"), b.w_mlp2.as_slice_mut().unwrap());
            f(&format!("block{l}.ln1_gamma"), b.ln1.gamma.as_slice_mut().unwrap());
            f(&format!("block{l}.ln1_beta"), b.ln1.beta.as_slice_mut().unwrap());
            f(&format!("block{l}.ln2_gamma"), b.ln2.gamma.as_slice_mut().unwrap());
            f(&format!("block{l}.ln2_beta"), b.ln2.beta.as_slice_mut().unwrap());
            f(&format!("block{l}.sls_msa"), b.sls_msa.as_slice_mut().unwrap());
            f(&format!("block{l}.sls_mlp"), b.sls_mlp.as_slice_mut().unwrap());
        }
        f("head", self.head.as_slice_mut().unwrap());
    }
}

/// Parameter gradients, same shapes as [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub patch_embed: Array2<f64>,
    pub blocks: Vec<BlockGradients>,
    pub head: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGradients {
    pub w_qkv: Array2<f64>,
    pub w_proj: Array2<f64>,
    pub w_mlp1: Array2<f64>,
    pub w_mlp2: Array2<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub sls_msa: Array1<f64>,
    pub sls_mlp: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            patch_embed: Array2::zeros(params.patch_embed.raw_dim()),
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockGradients {
                    w_qkv: Array2::zeros(b.w_qkv.raw_dim()),
                    w_proj: Array2::zeros(b.w_proj.raw_dim()),
                    w_mlp1: Array2::zeros(b.w_mlp1.raw_dim()),
                    w_mlp2: Array2::zeros(b.w_mlp2.raw_dim()),
                    ln1_gamma: Array1::zeros(b.ln1.gamma.len()),
                    ln1_beta: Array1::zeros(b.ln1.beta.len()),
                    ln2_gamma: Array1::zeros(b.ln2.gamma.len()),
                    ln2_beta: Array1::zeros(b.ln2.beta.len()),
                    sls_msa: Array1::zeros(b.sls_msa.len()),
                    sls_mlp: Array1::zeros(b.sls_mlp.len()),
                })
                .collect(),
            head: Array2::zeros(params.head.raw_dim()),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &[f64])) {
        f("patch_embed", self.patch_embed.as_slice().unwrap());
        for (l, b) in self.blocks.iter().enumerate() {
            f(&format!("block{l}.w_qkv"), b.w_qkv.as_slice().unwrap());
            f(&format!("block{l}.w_proj"), b.w_proj.as_slice().unwrap());
            f(&format!("block{l}.w_mlp1"), b.w_mlp1.as_slice().unwrap());
            f(&format!("block{l}.w_mlp2"), b.w_mlp2.as_slice().unwrap());
            f(&format!("block{l}.ln1_gamma"), b.ln1_gamma.as_slice().unwrap());
            f(&format!("block{l}.ln1_beta"), b.ln1_beta.as_slice().unwrap());
            f(&format!("block{l}.ln2_gamma"), b.ln2_gamma.as_slice().unwrap());
            f(&format!("block{l}.ln2_beta"), b.ln2_beta.as_slice().unwrap());
            f(&format!("block{l}.sls_msa"), b.sls_msa.as_slice().unwrap());
            f(&format!("block{l}.sls_mlp"), b.sls_mlp.as_slice().unwrap());
        }
        f("head", self.head.as_slice().unwrap());
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// y = x W^T over the token dimension: (B,F,in) x (out,in) -> (B,F,out).
fn gemm_nt(x: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (b, f, d) = x.dim();
    let x2 = x
        .view()
        .into_shape_with_order((b * f, d))
        .expect("contiguous activations");
    let y2 = x2.dot(&w.t());
    let out = y2.len_of(Axis(1));
    y2.into_shape_with_order((b, f, out)).unwrap()
}

/// dW = dy^T x accumulated over batch and tokens: (B,F,out),(B,F,in) -> (out,in).
fn gemm_grad_w(dy: &Array3<f64>, x: &Array3<f64>) -> Array2<f64> {
    let (b, f, o) = dy.dim();
    let d = x.len_of(Axis(2));
    let dy2 = dy.view().into_shape_with_order((b * f, o)).unwrap();
    let x2 = x.view().into_shape_with_order((b * f, d)).unwrap();
    dy2.t().dot(&x2)
}

/// dx = dy W: (B,F,out) x (out,in) -> (B,F,in).
fn gemm_grad_x(dy: &Array3<f64>, w: &Array2<f64>) -> Array3<f64> {
    let (b, f, o) = dy.dim();
    let dy2 = dy.view().into_shape_with_order((b * f, o)).unwrap();
    let dx2 = dy2.dot(w);
    let d = dx2.len_of(Axis(1));
    dx2.into_shape_with_order((b, f, d)).unwrap()
}

/// Quantize-dequantize with a per-tensor dynamic scale; identity when the
/// tensor is all zeros.
fn act_qdq<D: Dimension>(x: &ndarray::Array<f64, D>, bits: u32) -> Result<ndarray::Array<f64, D>> {
    let (codes, scale) = quantize_activations(x.view().into_dyn(), bits)?;
    let deq = codes.mapv(|c| c as f64 * scale);
    Ok(deq.into_dimensionality::<D>().unwrap())
}

struct LnCache {
    xhat: Array3<f64>,
    invstd: Array2<f64>,
}

fn layernorm(x: &Array3<f64>, p: &LayerNormParams) -> (Array3<f64>, LnCache) {
    let (b, f, d) = x.dim();
    let mut out = Array3::zeros((b, f, d));
    let mut xhat = Array3::zeros((b, f, d));
    let mut invstd = Array2::zeros((b, f));
    for bi in 0..b {
        for fi in 0..f {
            let v = x.slice(s![bi, fi, ..]);
            let mean = v.sum() / d as f64;
            let var = v.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            invstd[(bi, fi)] = inv;
            for di in 0..d {
                let h = (v[di] - mean) * inv;
                xhat[(bi, fi, di)] = h;
                out[(bi, fi, di)] = p.gamma[di] * h + p.beta[di];
            }
        }
    }
    (out, LnCache { xhat, invstd })
}

fn layernorm_backward(
    dout: &Array3<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array3<f64> {
    let (b, f, d) = dout.dim();
    let mut dx = Array3::zeros((b, f, d));
    for bi in 0..b {
        for fi in 0..f {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for di in 0..d {
                let g = dout[(bi, fi, di)];
                let xh = cache.xhat[(bi, fi, di)];
                dgamma[di] += g * xh;
                dbeta[di] += g;
                let dxhat = g * p.gamma[di];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xh;
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let inv = cache.invstd[(bi, fi)];
            for di in 0..d {
                let dxhat = dout[(bi, fi, di)] * p.gamma[di];
                dx[(bi, fi, di)] = inv
                    * (dxhat - mean_dxhat - cache.xhat[(bi, fi, di)] * mean_dxhat_xhat);
            }
        }
    }
    dx
}

/// Per-channel scale of a residual branch: x + sls (.) branch.
fn scaled_residual_add(x: &mut Array3<f64>, sls: &Array1<f64>, branch: &Array3<f64>) {
    let (b, f, d) = x.dim();
    for bi in 0..b {
        for fi in 0..f {
            for di in 0..d {
                x[(bi, fi, di)] += sls[di] * branch[(bi, fi, di)];
            }
        }
    }
}

struct BlockCache {
    ln1: LnCache,
    qkv_in: Array3<f64>,
    w_qkv_fq: Array2<f64>,
    mask_qkv: Array2<f64>,
    q_q: Array3<f64>,
    k_q: Array3<f64>,
    v_q: Array3<f64>,
    probs: Array4<f64>,
    probs_q: Array4<f64>,
    proj_in: Array3<f64>,
    w_proj_fq: Array2<f64>,
    mask_proj: Array2<f64>,
    msa: Array3<f64>,
    ln2: LnCache,
    mlp_in: Array3<f64>,
    w_mlp1_fq: Array2<f64>,
    mask_mlp1: Array2<f64>,
    pre_gelu: Array3<f64>,
    gelu_q: Array3<f64>,
    w_mlp2_fq: Array2<f64>,
    mask_mlp2: Array2<f64>,
    mlp: Array3<f64>,
}

pub struct ForwardCache {
    tokens: Array3<f64>,
    blocks: Vec<BlockCache>,
    pooled: Array2<f64>,
}

fn weight_qdq(
    w: &Array2<f64>,
    tags: &[PrecisionTag],
    cfg: &ToyModelConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    match cfg.quant {
        QuantKind::Off => Ok((w.clone(), Array2::ones(w.raw_dim()))),
        QuantKind::WeightsOnly | QuantKind::Full => {
            let params = QuantParams::with_act_bits(cfg.act_bits)?;
            fake_quantize(w, tags, &params)
        }
    }
}

fn maybe_act_qdq<D: Dimension>(
    x: &ndarray::Array<f64, D>,
    cfg: &ToyModelConfig,
) -> Result<ndarray::Array<f64, D>> {
    match cfg.quant {
        QuantKind::Full => act_qdq(x, cfg.act_bits),
        _ => Ok(x.clone()),
    }
}

/// Runs the encoder and classifier, returning logits (B, classes) and the
/// cache needed by [`backward`].
pub fn forward(
    params: &ModelParams,
    config: &ToyModelConfig,
    tokens: &Array3<f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    config.validate()?;
    let (batch, f, td) = tokens.dim();
    if td != config.token_dim || f == 0 || batch == 0 {
        return Err(Error::ShapeMismatch(format!(
            "batch tokens {batch}x{f}x{td} vs token_dim {}",
            config.token_dim
        )));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWeight);
    }

    let mut x = gemm_nt(tokens, &params.patch_embed);
    let mut blocks = Vec::with_capacity(config.depth);

    for (l, bp) in params.blocks.iter().enumerate() {
        let heads = config.heads;
        let h = config.hidden_dims[l];
        let dh = h / heads;

        // Attention branch.
        let (ln1_out, ln1_cache) = layernorm(&x, &bp.ln1);
        let qkv_in = maybe_act_qdq(&ln1_out, config)?;
        let (w_qkv_fq, mask_qkv) = weight_qdq(&bp.w_qkv, &bp.tags_qkv, config)?;
        let qkv = gemm_nt(&qkv_in, &w_qkv_fq);
        let q = qkv.slice(s![.., .., 0..h]).to_owned();
        let k = qkv.slice(s![.., .., h..2 * h]).to_owned();
        let v = qkv.slice(s![.., .., 2 * h..3 * h]).to_owned();
        let q_q = maybe_act_qdq(&q, config)?;
        let k_q = maybe_act_qdq(&k, config)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = Array4::zeros((batch, heads, f, f));
        for bi in 0..batch {
            for hi in 0..heads {
                let qh = q_q.slice(s![bi, .., hi * dh..(hi + 1) * dh]);
                let kh = k_q.slice(s![bi, .., hi * dh..(hi + 1) * dh]);
                let scores = qh.dot(&kh.t()) * scale;
                for fi in 0..f {
                    let row = scores.row(fi);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for (fj, e) in exps.iter().enumerate() {
                        probs[(bi, hi, fi, fj)] = e / sum;
                    }
                }
            }
        }
        let probs_q = maybe_act_qdq(&probs, config)?;
        let v_q = maybe_act_qdq(&v, config)?;
        let mut ctx = Array3::zeros((batch, f, h));
        for bi in 0..batch {
            for hi in 0..heads {
                let ph = probs_q.slice(s![bi, hi, .., ..]);
                let vh = v_q.slice(s![bi, .., hi * dh..(hi + 1) * dh]);
                let ch = ph.dot(&vh);
                ctx.slice_mut(s![bi, .., hi * dh..(hi + 1) * dh]).assign(&ch);
            }
        }
        let proj_in = maybe_act_qdq(&ctx, config)?;
        let (w_proj_fq, mask_proj) = weight_qdq(&bp.w_proj, &bp.tags_proj, config)?;
        let msa = gemm_nt(&proj_in, &w_proj_fq);
        scaled_residual_add(&mut x, &bp.sls_msa, &msa);

        // MLP branch.
        let (ln2_out, ln2_cache) = layernorm(&x, &bp.ln2);
        let mlp_in = maybe_act_qdq(&ln2_out, config)?;
        let (w_mlp1_fq, mask_mlp1) = weight_qdq(&bp.w_mlp1, &bp.tags_mlp1, config)?;
        let pre_gelu = gemm_nt(&mlp_in, &w_mlp1_fq);
        let gelu_out = pre_gelu.mapv(gelu);
        let gelu_q = maybe_act_qdq(&gelu_out, config)?;
        let (w_mlp2_fq, mask_mlp2) = weight_qdq(&bp.w_mlp2, &bp.tags_mlp2, config)?;
        let mlp = gemm_nt(&gelu_q, &w_mlp2_fq);
        scaled_residual_add(&mut x, &bp.sls_mlp, &mlp);

        blocks.push(BlockCache {
            ln1: ln1_cache,
            qkv_in,
            w_qkv_fq,
            mask_qkv,
            q_q,
            k_q,
            v_q,
            probs,
            probs_q,
            proj_in,
            w_proj_fq,
            mask_proj,
            msa,
            ln2: ln2_cache,
            mlp_in,
            w_mlp1_fq,
            mask_mlp1,
            pre_gelu,
            gelu_q,
            w_mlp2_fq,
            mask_mlp2,
            mlp,
        });
    }

    let pooled = x.mean_axis(Axis(1)).expect("tokens > 0");
    let logits = pooled.dot(&params.head.t());
    Ok((
        logits,
        ForwardCache {
            tokens: tokens.clone(),
            blocks,
            pooled,
        },
    ))
}

/// Exact reverse pass for all parameters; quantizer gradients flow through
/// the clipped straight-through masks.
pub fn backward(
    params: &ModelParams,
    config: &ToyModelConfig,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    let (batch, f, _) = cache.tokens.dim();

    grads.head = dlogits.t().dot(&cache.pooled);
    let dpooled = dlogits.dot(&params.head);

    // Mean pool spreads the gradient uniformly over tokens.
    let e = dpooled.len_of(Axis(1));
    let mut dx = Array3::zeros((batch, f, e));
    for bi in 0..batch {
        for fi in 0..f {
            for di in 0..e {
                dx[(bi, fi, di)] = dpooled[(bi, di)] / f as f64;
            }
        }
    }

    for (l, (bp, bc)) in params.blocks.iter().zip(cache.blocks.iter()).enumerate().rev() {
        let heads = config.heads;
        let h = config.hidden_dims[l];
        let dh = h / heads;
        let g = &mut grads.blocks[l];

        // MLP branch.
        let mut dmlp = Array3::zeros(bc.mlp.raw_dim());
        for bi in 0..batch {
            for fi in 0..f {
                for di in 0..e {
                    let up = dx[(bi, fi, di)];
                    g.sls_mlp[di] += up * bc.mlp[(bi, fi, di)];
                    dmlp[(bi, fi, di)] = up * bp.sls_mlp[di];
                }
            }
        }
        let mut dw2 = gemm_grad_w(&dmlp, &bc.gelu_q);
        dw2 *= &bc.mask_mlp2;
        g.w_mlp2 = dw2;
        let dgelu = gemm_grad_x(&dmlp, &bc.w_mlp2_fq);
        let dpre = ndarray::Zip::from(&dgelu)
            .and(&bc.pre_gelu)
            .map_collect(|&dg, &x| dg * gelu_grad(x));
        let mut dw1 = gemm_grad_w(&dpre, &bc.mlp_in);
        dw1 *= &bc.mask_mlp1;
        g.w_mlp1 = dw1;
        let dln2_out = gemm_grad_x(&dpre, &bc.w_mlp1_fq);
        let dx_mid_extra =
            layernorm_backward(&dln2_out, &bc.ln2, &bp.ln2, &mut g.ln2_gamma, &mut g.ln2_beta);
        dx += &dx_mid_extra;

        // Attention branch.
        let mut dmsa = Array3::zeros(bc.msa.raw_dim());
        for bi in 0..batch {
            for fi in 0..f {
                for di in 0..e {
                    let up = dx[(bi, fi, di)];
                    g.sls_msa[di] += up * bc.msa[(bi, fi, di)];
                    dmsa[(bi, fi, di)] = up * bp.sls_msa[di];
                }
            }
        }
        let mut dwp = gemm_grad_w(&dmsa, &bc.proj_in);
        dwp *= &bc.mask_proj;
        g.w_proj = dwp;
        let dctx = gemm_grad_x(&dmsa, &bc.w_proj_fq);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array3::zeros((batch, f, h));
        let mut dk = Array3::zeros((batch, f, h));
        let mut dv = Array3::zeros((batch, f, h));
        for bi in 0..batch {
            for hi in 0..heads {
                let cols = hi * dh..(hi + 1) * dh;
                let dctx_h = dctx.slice(s![bi, .., cols.clone()]);
                let ph_q = bc.probs_q.slice(s![bi, hi, .., ..]);
                let vh_q = bc.v_q.slice(s![bi, .., cols.clone()]);
                let dprobs = dctx_h.dot(&vh_q.t());
                dv.slice_mut(s![bi, .., cols.clone()])
                    .assign(&ph_q.t().dot(&dctx_h));

                // Softmax backward on the real probabilities.
                let ph = bc.probs.slice(s![bi, hi, .., ..]);
                let mut dscores = Array2::zeros((f, f));
                for fi in 0..f {
                    let dot: f64 = (0..f).map(|fj| dprobs[(fi, fj)] * ph[(fi, fj)]).sum();
                    for fj in 0..f {
                        dscores[(fi, fj)] = ph[(fi, fj)] * (dprobs[(fi, fj)] - dot);
                    }
                }
                let qh = bc.q_q.slice(s![bi, .., cols.clone()]);
                let kh = bc.k_q.slice(s![bi, .., cols.clone()]);
                dq.slice_mut(s![bi, .., cols.clone()])
                    .assign(&(dscores.dot(&kh) * scale));
                dk.slice_mut(s![bi, .., cols])
                    .assign(&(dscores.t().dot(&qh) * scale));
            }
        }

        let mut dqkv = Array3::zeros((batch, f, 3 * h));
        dqkv.slice_mut(s![.., .., 0..h]).assign(&dq);
        dqkv.slice_mut(s![.., .., h..2 * h]).assign(&dk);
        dqkv.slice_mut(s![.., .., 2 * h..3 * h]).assign(&dv);
        let mut dwqkv = gemm_grad_w(&dqkv, &bc.qkv_in);
        dwqkv *= &bc.mask_qkv;
        g.w_qkv = dwqkv;
        let dln1_out = gemm_grad_x(&dqkv, &bc.w_qkv_fq);
        let dx_in_extra =
            layernorm_backward(&dln1_out, &bc.ln1, &bp.ln1, &mut g.ln1_gamma, &mut g.ln1_beta);
        dx += &dx_in_extra;
    }

    grads.patch_embed = gemm_grad_w(&dx, &cache.tokens);
    grads
}

/// Plain gradient-descent update, p -= lr * g.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    params
        .patch_embed
        .zip_mut_with(&grads.patch_embed, |w, &g| *w -= lr * g);
    for (bp, bg) in params.blocks.iter_mut().zip(grads.blocks.iter()) {
        bp.w_qkv.zip_mut_with(&bg.w_qkv, |w, &g| *w -= lr * g);
        bp.w_proj.zip_mut_with(&bg.w_proj, |w, &g| *w -= lr * g);
        bp.w_mlp1.zip_mut_with(&bg.w_mlp1, |w, &g| *w -= lr * g);
        bp.w_mlp2.zip_mut_with(&bg.w_mlp2, |w, &g| *w -= lr * g);
        bp.ln1.gamma.zip_mut_with(&bg.ln1_gamma, |w, &g| *w -= lr * g);
        bp.ln1.beta.zip_mut_with(&bg.ln1_beta, |w, &g| *w -= lr * g);
        bp.ln2.gamma.zip_mut_with(&bg.ln2_gamma, |w, &g| *w -= lr * g);
        bp.ln2.beta.zip_mut_with(&bg.ln2_beta, |w, &g| *w -= lr * g);
        bp.sls_msa.zip_mut_with(&bg.sls_msa, |w, &g| *w -= lr * g);
        bp.sls_mlp.zip_mut_with(&bg.sls_mlp, |w, &g| *w -= lr * g);
    }
    params.head.zip_mut_with(&grads.head, |w, &g| *w -= lr * g);
}

/// Distillation settings: mixing weight, temperature, and optional teacher
/// logits aligned with the batch.
#[derive(Debug, Clone)]
pub struct KdConfig {
    pub alpha: f64,
    pub tau: f64,
    pub teacher_logits: Option<Array2<f64>>,
}

impl KdConfig {
    pub fn hard_labels_only() -> Self {
        KdConfig {
            alpha: 0.0,
            tau: 1.0,
            teacher_logits: None,
        }
    }
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Soft-distillation loss: (1-alpha) * CE(softmax(z_s), y) +
/// alpha * tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau)), averaged over
/// the batch, with its exact gradient with respect to the student logits.
pub fn kd_loss(
    student_logits: &Array2<f64>,
    labels: &[usize],
    kd: &KdConfig,
) -> Result<(f64, Array2<f64>)> {
    let (b, c) = student_logits.dim();
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} logits rows",
            labels.len(),
            b
        )));
    }
    if student_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWeight);
    }
    if !(0.0..=1.0).contains(&kd.alpha) || kd.tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidConfig("need 0 <= alpha <= 1 and tau > 0".into()));
    }
    let teacher = match (&kd.teacher_logits, kd.alpha > 0.0) {
        (Some(t), _) => Some(t),
        (None, true) => return Err(Error::MissingTeacher),
        (None, false) => None,
    };
    if let Some(t) = teacher {
        if t.dim() != (b, c) {
            return Err(Error::ShapeMismatch(format!(
                "teacher logits {:?} vs student {:?}",
                t.dim(),
                student_logits.dim()
            )));
        }
    }

    let ps = softmax_rows(student_logits);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, c));

    // Hard-label cross entropy.
    for (bi, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidConfig(format!("label {y} out of {c} classes")));
        }
        loss += (1.0 - kd.alpha) * -(ps[(bi, y)].max(1e-300)).ln() / b as f64;
        for ci in 0..c {
            let onehot = if ci == y { 1.0 } else { 0.0 };
            grad[(bi, ci)] += (1.0 - kd.alpha) * (ps[(bi, ci)] - onehot) / b as f64;
        }
    }

    // Soft targets at temperature tau.
    if kd.alpha > 0.0 {
        let t = teacher.unwrap();
        let ps_t = softmax_rows(&student_logits.mapv(|v| v / kd.tau));
        let pt_t = softmax_rows(&t.mapv(|v| v / kd.tau));
        for bi in 0..b {
            let mut kl = 0.0;
            for ci in 0..c {
                let pt = pt_t[(bi, ci)];
                if pt > 0.0 {
                    kl += pt * (pt.ln() - ps_t[(bi, ci)].max(1e-300).ln());
                }
                grad[(bi, ci)] +=
                    kd.alpha * kd.tau * (ps_t[(bi, ci)] - pt) / b as f64;
            }
            loss += kd.alpha * kd.tau * kd.tau * kl / b as f64;
        }
    }

    Ok((loss, grad))
}

/// Deterministic top-1 accuracy (first arg-max wins ties).
pub fn evaluate(
    params: &ModelParams,
    config: &ToyModelConfig,
    inputs: &Array3<f64>,
    labels: &[usize],
) -> Result<f64> {
    let n = labels.len();
    let mut correct = 0usize;
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let batch = inputs.slice(s![start..end, .., ..]).to_owned();
        let (logits, _) = forward(params, config, &batch)?;
        for (bi, &y) in labels[start..end].iter().enumerate() {
            let row = logits.row(bi);
            let mut best = 0;
            for ci in 1..row.len() {
                if row[ci] > row[best] {
                    best = ci;
                }
            }
            if best == y {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Argmax logits built directly from class prototypes: with zeroed residual
/// scaling the encoder is the identity, so nearest-prototype classification
/// memorizes the generating distribution.
pub fn prototype_classifier(
    config: &ToyModelConfig,
    prototypes: &Array3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, rng)?;
    for b in &mut params.blocks {
        b.sls_msa.fill(0.0);
        b.sls_mlp.fill(0.0);
    }
    // Identity-ish patch embedding requires embed_dim == token_dim.
    if config.embed_dim != config.token_dim {
        return Err(Error::InvalidConfig(
            "prototype classifier needs embed_dim == token_dim".into(),
        ));
    }
    params.patch_embed = Array2::eye(config.embed_dim);
    // Head row c = pooled prototype of class c; logits become inner products
    // with the pooled class means.
    let f = prototypes.len_of(Axis(1));
    let mut head = Array2::zeros((config.num_classes, config.embed_dim));
    for cl in 0..config.num_classes {
        for fi in 0..f {
            for di in 0..config.token_dim {
                head[(cl, di)] += prototypes[(cl, fi, di)] / f as f64;
            }
        }
    }
    params.head = head;
    Ok(params)
}

pub fn view_batch(inputs: &Array3<f64>, idx: &[usize]) -> Array3<f64> {
    let (_, f, d) = inputs.dim();
    let mut x = Array3::zeros((idx.len(), f, d));
    for (bi, &i) in idx.iter().enumerate() {
        x.index_axis_mut(Axis(0), bi)
            .assign(&inputs.index_axis(Axis(0), i));
    }
    x
}

pub use crate::data::Split;
