//! Search-space encoding, mixed-precision weight entanglement, subnet
//! sampling and extraction, and the supernet training loop.
//!
//! Every searched dimension owns a widened latent axis of H + D_max entries,
//! where H = rho_max * D_max rows form a fixed 8-bit zone and the remaining
//! D_max rows a 4-bit zone. A subnet of size d with 8-bit ratio rho reads
//! the contiguous window starting at H - rho*d, which overlaps the 8-bit
//! zone by exactly rho*d rows; moving the window changes the achieved ratio
//! while every row keeps one immutable precision for the supernet lifetime.
//! Training updates exactly the windowed entries of the sampled subnet and
//! leaves the rest of the supernet bitwise untouched.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::quant::PrecisionTag;
use crate::qvt::{read_qvt, write_qvt, QvtTensor};
use crate::vit::{
    backward, evaluate, forward, kd_loss, EncoderParams, Gradients, KdConfig, LayerNormParams,
    ModelParams, QuantKind, ToyModelConfig,
};

/// Fixed model geometry that is not searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub token_dim: usize,
    pub tokens: usize,
    pub num_heads: usize,
    pub num_classes: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            token_dim: 16,
            tokens: 8,
            num_heads: 2,
            num_classes: 4,
        }
    }
}

/// The five searched dimensions. Loads full-scale and toy-scale spaces from
/// the same schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub embed_dims: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    pub mixed_ratios: Vec<f64>,
    pub expansion_ratios: Vec<f64>,
    pub depths: Vec<usize>,
}

fn integral(x: f64) -> Option<usize> {
    let r = x.round();
    if (x - r).abs() < 1e-9 && r >= 0.0 {
        Some(r as usize)
    } else {
        None
    }
}

impl SearchSpace {
    pub fn toy() -> Self {
        SearchSpace {
            embed_dims: vec![8, 16],
            hidden_dims: vec![8, 16],
            mixed_ratios: vec![0.0, 0.25, 0.5],
            expansion_ratios: vec![1.0, 2.0],
            depths: vec![1, 2],
        }
    }

    pub fn max_embed(&self) -> usize {
        *self.embed_dims.iter().max().unwrap()
    }

    pub fn max_hidden(&self) -> usize {
        *self.hidden_dims.iter().max().unwrap()
    }

    pub fn max_depth(&self) -> usize {
        *self.depths.iter().max().unwrap()
    }

    pub fn max_ratio(&self) -> f64 {
        self.mixed_ratios.iter().cloned().fold(0.0, f64::max)
    }

    pub fn mlp_hidden_of(embed: usize, expansion: f64) -> usize {
        (embed as f64 * expansion).round() as usize
    }

    pub fn max_mlp_hidden(&self) -> usize {
        let mut m = 0;
        for &e in &self.embed_dims {
            for &x in &self.expansion_ratios {
                m = m.max(Self::mlp_hidden_of(e, x));
            }
        }
        m
    }

    /// Rejects empty dimension lists, ratios outside `[0, 1]`, and any
    /// (dimension, ratio) pair whose 8-bit row count would not be integral.
    pub fn validate(&self, arch: &ModelArch) -> Result<()> {
        if self.embed_dims.is_empty()
            || self.hidden_dims.is_empty()
            || self.mixed_ratios.is_empty()
            || self.expansion_ratios.is_empty()
            || self.depths.is_empty()
        {
            return Err(Error::InvalidConfig("empty search dimension".into()));
        }
        if self.depths.contains(&0) {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        for &r in &self.mixed_ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("mixed ratio {r} outside [0,1]")));
            }
        }
        for &h in &self.hidden_dims {
            if h % arch.num_heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "hidden dim {h} not divisible by {} heads",
                    arch.num_heads
                )));
            }
        }
        let mut dims: Vec<usize> = Vec::new();
        dims.extend(&self.embed_dims);
        dims.extend(&self.hidden_dims);
        for &e in &self.embed_dims {
            for &x in &self.expansion_ratios {
                dims.push(Self::mlp_hidden_of(e, x));
            }
        }
        for &d in &dims {
            for &r in &self.mixed_ratios {
                if integral(r * d as f64).is_none() {
                    return Err(Error::InfeasibleWindow { ratio: r, dim: d });
                }
            }
        }
        for d_max in [self.max_embed(), self.max_hidden(), self.max_mlp_hidden()] {
            if integral(self.max_ratio() * d_max as f64).is_none() {
                return Err(Error::InfeasibleWindow {
                    ratio: self.max_ratio(),
                    dim: d_max,
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_file(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Every config in the space, in deterministic order. Only sensible for
    /// toy-sized spaces.
    pub fn enumerate(&self) -> Vec<SubnetConfig> {
        let mut out = Vec::new();
        let mut layer_choices: Vec<(usize, f64, f64)> = Vec::new();
        for &h in &self.hidden_dims {
            for &x in &self.expansion_ratios {
                for &r in &self.mixed_ratios {
                    layer_choices.push((h, x, r));
                }
            }
        }
        for &e in &self.embed_dims {
            for &d in &self.depths {
                let mut stack: Vec<Vec<(usize, f64, f64)>> = vec![vec![]];
                for _ in 0..d {
                    let mut next = Vec::new();
                    for prefix in &stack {
                        for &c in &layer_choices {
                            let mut p = prefix.clone();
                            p.push(c);
                            next.push(p);
                        }
                    }
                    stack = next;
                }
                for genes in stack {
                    out.push(SubnetConfig {
                        embed_dim: e,
                        depth: d,
                        hidden_dims: genes.iter().map(|g| g.0).collect(),
                        expansion_ratios: genes.iter().map(|g| g.1).collect(),
                        mixed_ratios: genes.iter().map(|g| g.2).collect(),
                    });
                }
            }
        }
        out
    }
}

/// One sampled architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub hidden_dims: Vec<usize>,
    pub expansion_ratios: Vec<f64>,
    pub mixed_ratios: Vec<f64>,
}

impl SubnetConfig {
    pub fn mlp_hidden(&self, layer: usize) -> usize {
        SearchSpace::mlp_hidden_of(self.embed_dim, self.expansion_ratios[layer])
    }

    pub fn validate_against(&self, arch: &ModelArch) -> Result<()> {
        if self.depth == 0
            || self.hidden_dims.len() != self.depth
            || self.expansion_ratios.len() != self.depth
            || self.mixed_ratios.len() != self.depth
        {
            return Err(Error::InvalidConfig("per-layer lists must match depth".into()));
        }
        for &h in &self.hidden_dims {
            if h == 0 || h % arch.num_heads != 0 {
                return Err(Error::InvalidConfig(format!(
                    "hidden dim {h} incompatible with {} heads",
                    arch.num_heads
                )));
            }
        }
        Ok(())
    }

    pub fn in_space(&self, space: &SearchSpace) -> bool {
        space.embed_dims.contains(&self.embed_dim)
            && space.depths.contains(&self.depth)
            && self.hidden_dims.iter().all(|h| space.hidden_dims.contains(h))
            && self
                .expansion_ratios
                .iter()
                .all(|x| space.expansion_ratios.contains(x))
            && self.mixed_ratios.iter().all(|r| space.mixed_ratios.contains(r))
    }

    /// Total parameter count including layer-norm and residual-scaling
    /// vectors, the patch embedding, and the classifier head.
    pub fn param_count(&self, arch: &ModelArch) -> u64 {
        let e = self.embed_dim as u64;
        let mut p = e * arch.token_dim as u64 + arch.num_classes as u64 * e;
        for l in 0..self.depth {
            let h = self.hidden_dims[l] as u64;
            let mh = self.mlp_hidden(l) as u64;
            p += 3 * h * e + e * h + 2 * mh * e + 6 * e;
        }
        p
    }

    /// Multiply-accumulate count for one input.
    pub fn macs(&self, arch: &ModelArch) -> u64 {
        let e = self.embed_dim as u64;
        let f = arch.tokens as u64;
        let heads = arch.num_heads as u64;
        let mut m = f * e * arch.token_dim as u64 + arch.num_classes as u64 * e;
        for l in 0..self.depth {
            let h = self.hidden_dims[l] as u64;
            let mh = self.mlp_hidden(l) as u64;
            let dh = h / heads;
            m += f * 3 * h * e;
            m += 2 * heads * f * f * dh;
            m += f * e * h;
            m += 2 * f * mh * e;
        }
        m
    }

    /// Parameter-weighted 8-bit ratio over the quantized GEMM weights.
    pub fn weighted_mixed_ratio(&self) -> f64 {
        let e = self.embed_dim as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..self.depth {
            let h = self.hidden_dims[l] as f64;
            let mh = self.mlp_hidden(l) as f64;
            let params = 3.0 * h * e + e * h + 2.0 * mh * e;
            num += params * self.mixed_ratios[l];
            den += params;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Maximal-capacity config: the largest value of every dimension.
    pub fn largest(space: &SearchSpace) -> Self {
        let depth = space.max_depth();
        SubnetConfig {
            embed_dim: space.max_embed(),
            depth,
            hidden_dims: vec![space.max_hidden(); depth],
            expansion_ratios: vec![
                space
                    .expansion_ratios
                    .iter()
                    .cloned()
                    .fold(f64::MIN, f64::max);
                depth
            ],
            mixed_ratios: vec![space.max_ratio(); depth],
        }
    }
}

/// Uniform independent choice per dimension and per layer.
pub fn sample_subnet(space: &SearchSpace, rng: &mut ChaCha8Rng) -> SubnetConfig {
    let embed_dim = *space.embed_dims.choose(rng).unwrap();
    let depth = *space.depths.choose(rng).unwrap();
    let mut hidden_dims = Vec::with_capacity(depth);
    let mut expansion_ratios = Vec::with_capacity(depth);
    let mut mixed_ratios = Vec::with_capacity(depth);
    for _ in 0..depth {
        hidden_dims.push(*space.hidden_dims.choose(rng).unwrap());
        expansion_ratios.push(*space.expansion_ratios.choose(rng).unwrap());
        mixed_ratios.push(*space.mixed_ratios.choose(rng).unwrap());
    }
    SubnetConfig {
        embed_dim,
        depth,
        hidden_dims,
        expansion_ratios,
        mixed_ratios,
    }
}

pub fn sample_subnet_seeded(space: &SearchSpace, seed: u64) -> SubnetConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_subnet(space, &mut rng)
}

/// A contiguous slice of a super dimension, positioned by the 8-bit ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSelection {
    pub offset: usize,
    pub len: usize,
    /// Rows overlapping the 8-bit zone; equals ratio * len.
    pub w8_len: usize,
}

impl WindowSelection {
    pub fn achieved_ratio(&self) -> f64 {
        self.w8_len as f64 / self.len as f64
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Window geometry for one super dimension with zone boundary `h` and
/// maximal window `d_max`: offset = h - ratio*d.
pub fn select_window(h: usize, d_max: usize, d: usize, ratio: f64) -> Result<WindowSelection> {
    let w8 = integral(ratio * d as f64).ok_or(Error::InfeasibleWindow { ratio, dim: d })?;
    if d == 0 || d > d_max || w8 > h {
        return Err(Error::InvalidConfig(format!(
            "window of {d} rows at ratio {ratio} exceeds zone ({h}, {d_max})"
        )));
    }
    Ok(WindowSelection {
        offset: h - w8,
        len: d,
        w8_len: w8,
    })
}

/// A row window into the latent matrix: the aliasing weight view, the
/// per-row precision tags, and the aligned residual-scaling slice.
pub type WindowView<'a> = (
    ndarray::ArrayView2<'a, f64>,
    Vec<PrecisionTag>,
    Option<ndarray::ArrayView1<'a, f64>>,
);

/// Latent supernet weights for one matrix, with a fixed 8-bit row zone and
/// an optional residual-scaling vector sliced alongside the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EntangledLayer {
    latent: Array2<f64>,
    row_h: usize,
    row_d_max: usize,
    sls: Option<Array1<f64>>,
}

impl EntangledLayer {
    pub fn new(
        row_h: usize,
        row_d_max: usize,
        cols: usize,
        with_sls: bool,
        rng: &mut ChaCha8Rng,
        std: f64,
    ) -> Self {
        let rows = row_h + row_d_max;
        EntangledLayer {
            latent: Array2::from_shape_fn((rows, cols), |_| {
                rng.sample::<f64, _>(StandardNormal) * std
            }),
            row_h,
            row_d_max,
            sls: with_sls.then(|| Array1::from_elem(rows, 0.1)),
        }
    }

    pub fn super_rows(&self) -> usize {
        self.row_h + self.row_d_max
    }

    pub fn super_cols(&self) -> usize {
        self.latent.ncols()
    }

    pub fn zone_boundary(&self) -> usize {
        self.row_h
    }

    /// The immutable precision of one latent row.
    pub fn zone_tag(&self, row: usize) -> PrecisionTag {
        if row < self.row_h {
            PrecisionTag::W8
        } else {
            PrecisionTag::W4
        }
    }

    pub fn row_window(&self, d: usize, ratio: f64) -> Result<WindowSelection> {
        select_window(self.row_h, self.row_d_max, d, ratio)
    }

    /// Row window of the latent matrix plus the per-row tags and the aligned
    /// residual-scaling slice. The view aliases supernet storage.
    pub fn extract_window(&self, d: usize, ratio: f64) -> Result<WindowView<'_>> {
        let win = self.row_window(d, ratio)?;
        let view = self.latent.slice(s![win.range(), ..]);
        let tags = self.window_tags(&win);
        let sls = self.sls.as_ref().map(|v| v.slice(s![win.range()]));
        Ok((view, tags, sls))
    }

    /// First w8_len rows of the window sit in the 8-bit zone.
    pub fn window_tags(&self, win: &WindowSelection) -> Vec<PrecisionTag> {
        (0..win.len)
            .map(|i| self.zone_tag(win.offset + i))
            .collect()
    }

    pub fn submatrix(&self, rows: &WindowSelection, cols: &WindowSelection) -> Array2<f64> {
        self.latent.slice(s![rows.range(), cols.range()]).to_owned()
    }

    pub fn sls_slice(&self, rows: &WindowSelection) -> Option<Array1<f64>> {
        self.sls.as_ref().map(|v| v.slice(s![rows.range()]).to_owned())
    }

    fn apply_update(
        &mut self,
        rows: &WindowSelection,
        cols: &WindowSelection,
        grad: &Array2<f64>,
        lr: f64,
    ) {
        let mut target = self.latent.slice_mut(s![rows.range(), cols.range()]);
        target.zip_mut_with(grad, |w, &g| *w -= lr * g);
    }

    fn apply_sls_update(&mut self, rows: &WindowSelection, grad: &Array1<f64>, lr: f64) {
        if let Some(v) = self.sls.as_mut() {
            let mut target = v.slice_mut(s![rows.range()]);
            target.zip_mut_with(grad, |w, &g| *w -= lr * g);
        }
    }

    fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.latent.iter().copied().collect();
        if let Some(sls) = &self.sls {
            v.extend(sls.iter().copied());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct SupernetBlock {
    pub w_q: EntangledLayer,
    pub w_k: EntangledLayer,
    pub w_v: EntangledLayer,
    pub w_proj: EntangledLayer,
    pub w_mlp1: EntangledLayer,
    pub w_mlp2: EntangledLayer,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// Zone boundaries (h) and maximal window sizes (d_max) of the three
/// searched dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperDims {
    pub e_h: usize,
    pub e_max: usize,
    pub h_h: usize,
    pub h_max: usize,
    pub m_h: usize,
    pub m_max: usize,
}

impl SuperDims {
    pub fn from_space(space: &SearchSpace) -> Result<Self> {
        let rho = space.max_ratio();
        let e_max = space.max_embed();
        let h_max = space.max_hidden();
        let m_max = space.max_mlp_hidden();
        let zone = |d: usize| {
            integral(rho * d as f64).ok_or(Error::InfeasibleWindow { ratio: rho, dim: d })
        };
        Ok(SuperDims {
            e_h: zone(e_max)?,
            e_max,
            h_h: zone(h_max)?,
            h_max,
            m_h: zone(m_max)?,
            m_max,
        })
    }

    pub fn e_super(&self) -> usize {
        self.e_h + self.e_max
    }
}

/// Per-block windows of one sampled subnet. The stream entering block l
/// carries the previous block's embed window; everything the block itself
/// produces uses its own ratio.
struct SubnetWindows {
    embed_in: Vec<WindowSelection>,
    embed_own: Vec<WindowSelection>,
    hidden: Vec<WindowSelection>,
    mlp: Vec<WindowSelection>,
}

pub struct Supernet {
    pub space: SearchSpace,
    pub arch: ModelArch,
    pub act_bits: u32,
    pub dims: SuperDims,
    pub patch: Array2<f64>,
    pub blocks: Vec<SupernetBlock>,
    pub head: Array2<f64>,
}

impl Supernet {
    pub fn new(space: SearchSpace, arch: ModelArch, act_bits: u32, seed: u64) -> Result<Self> {
        space.validate(&arch)?;
        let dims = SuperDims::from_space(&space)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e_super = dims.e_super();
        let h_super = dims.h_h + dims.h_max;
        let m_super = dims.m_h + dims.m_max;
        let mut blocks = Vec::with_capacity(space.max_depth());
        for _ in 0..space.max_depth() {
            blocks.push(SupernetBlock {
                w_q: EntangledLayer::new(dims.h_h, dims.h_max, e_super, false, &mut rng, 0.02),
                w_k: EntangledLayer::new(dims.h_h, dims.h_max, e_super, false, &mut rng, 0.02),
                w_v: EntangledLayer::new(dims.h_h, dims.h_max, e_super, false, &mut rng, 0.02),
                w_proj: EntangledLayer::new(dims.e_h, dims.e_max, h_super, true, &mut rng, 0.02),
                w_mlp1: EntangledLayer::new(dims.m_h, dims.m_max, e_super, false, &mut rng, 0.02),
                w_mlp2: EntangledLayer::new(dims.e_h, dims.e_max, m_super, true, &mut rng, 0.02),
                ln1_gamma: Array1::ones(e_super),
                ln1_beta: Array1::zeros(e_super),
                ln2_gamma: Array1::ones(e_super),
                ln2_beta: Array1::zeros(e_super),
            });
        }
        Ok(Supernet {
            patch: Array2::from_shape_fn((e_super, arch.token_dim), |_| {
                rng.sample::<f64, _>(StandardNormal) / (arch.token_dim as f64).sqrt()
            }),
            head: Array2::from_shape_fn((arch.num_classes, e_super), |_| {
                rng.sample::<f64, _>(StandardNormal) / (e_super as f64).sqrt()
            }),
            space,
            arch,
            act_bits,
            dims,
            blocks,
        })
    }

    fn windows(&self, config: &SubnetConfig) -> Result<SubnetWindows> {
        config.validate_against(&self.arch)?;
        let e = config.embed_dim;
        let mut embed_in = Vec::with_capacity(config.depth);
        let mut embed_own = Vec::with_capacity(config.depth);
        let mut hidden = Vec::with_capacity(config.depth);
        let mut mlp = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let rho = config.mixed_ratios[l];
            let rho_in = config.mixed_ratios[l.saturating_sub(1)];
            embed_in.push(select_window(self.dims.e_h, self.dims.e_max, e, rho_in)?);
            embed_own.push(select_window(self.dims.e_h, self.dims.e_max, e, rho)?);
            hidden.push(select_window(
                self.dims.h_h,
                self.dims.h_max,
                config.hidden_dims[l],
                rho,
            )?);
            mlp.push(select_window(
                self.dims.m_h,
                self.dims.m_max,
                config.mlp_hidden(l),
                rho,
            )?);
        }
        Ok(SubnetWindows {
            embed_in,
            embed_own,
            hidden,
            mlp,
        })
    }

    /// Materializes the subnet's weights by copying the sampled windows out
    /// of the latent supernet.
    pub fn extract(&self, config: &SubnetConfig, quant: QuantKind) -> Result<(ModelParams, ToyModelConfig)> {
        let win = self.windows(config)?;
        let cfg = ToyModelConfig {
            embed_dim: config.embed_dim,
            depth: config.depth,
            heads: self.arch.num_heads,
            hidden_dims: config.hidden_dims.clone(),
            expansion_ratios: config.expansion_ratios.clone(),
            mixed_ratios: config.mixed_ratios.clone(),
            num_classes: self.arch.num_classes,
            token_dim: self.arch.token_dim,
            act_bits: self.act_bits,
            quant,
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let sb = &self.blocks[l];
            let h = config.hidden_dims[l];
            let e = config.embed_dim;
            let mut w_qkv = Array2::zeros((3 * h, e));
            let mut tags_qkv = Vec::with_capacity(3 * h);
            for (seg, layer) in [&sb.w_q, &sb.w_k, &sb.w_v].into_iter().enumerate() {
                let sub = layer.submatrix(&win.hidden[l], &win.embed_in[l]);
                w_qkv.slice_mut(s![seg * h..(seg + 1) * h, ..]).assign(&sub);
                tags_qkv.extend(layer.window_tags(&win.hidden[l]));
            }
            let w_proj = sb.w_proj.submatrix(&win.embed_own[l], &win.hidden[l]);
            let tags_proj = sb.w_proj.window_tags(&win.embed_own[l]);
            let sls_msa = sb.w_proj.sls_slice(&win.embed_own[l]).expect("proj carries sls");
            let w_mlp1 = sb.w_mlp1.submatrix(&win.mlp[l], &win.embed_own[l]);
            let tags_mlp1 = sb.w_mlp1.window_tags(&win.mlp[l]);
            let w_mlp2 = sb.w_mlp2.submatrix(&win.embed_own[l], &win.mlp[l]);
            let tags_mlp2 = sb.w_mlp2.window_tags(&win.embed_own[l]);
            let sls_mlp = sb.w_mlp2.sls_slice(&win.embed_own[l]).expect("mlp2 carries sls");
            blocks.push(EncoderParams {
                w_qkv,
                w_proj,
                w_mlp1,
                w_mlp2,
                ln1: LayerNormParams {
                    gamma: sb.ln1_gamma.slice(s![win.embed_in[l].range()]).to_owned(),
                    beta: sb.ln1_beta.slice(s![win.embed_in[l].range()]).to_owned(),
                },
                ln2: LayerNormParams {
                    gamma: sb.ln2_gamma.slice(s![win.embed_own[l].range()]).to_owned(),
                    beta: sb.ln2_beta.slice(s![win.embed_own[l].range()]).to_owned(),
                },
                sls_msa,
                sls_mlp,
                tags_qkv,
                tags_proj,
                tags_mlp1,
                tags_mlp2,
            });
        }
        let params = ModelParams {
            patch_embed: self.patch.slice(s![win.embed_in[0].range(), ..]).to_owned(),
            blocks,
            head: self
                .head
                .slice(s![.., win.embed_own[config.depth - 1].range()])
                .to_owned(),
        };
        Ok((params, cfg))
    }

    /// Scatters a gradient step back into exactly the sampled windows.
    pub fn apply_gradients(
        &mut self,
        config: &SubnetConfig,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        let win = self.windows(config)?;
        {
            let mut target = self.patch.slice_mut(s![win.embed_in[0].range(), ..]);
            target.zip_mut_with(&grads.patch_embed, |w, &g| *w -= lr * g);
        }
        for l in 0..config.depth {
            let h = config.hidden_dims[l];
            let g = &grads.blocks[l];
            let sb = &mut self.blocks[l];
            for (seg, layer) in [&mut sb.w_q, &mut sb.w_k, &mut sb.w_v].into_iter().enumerate() {
                let seg_grad = g.w_qkv.slice(s![seg * h..(seg + 1) * h, ..]).to_owned();
                layer.apply_update(&win.hidden[l], &win.embed_in[l], &seg_grad, lr);
            }
            sb.w_proj
                .apply_update(&win.embed_own[l], &win.hidden[l], &g.w_proj, lr);
            sb.w_proj.apply_sls_update(&win.embed_own[l], &g.sls_msa, lr);
            sb.w_mlp1
                .apply_update(&win.mlp[l], &win.embed_own[l], &g.w_mlp1, lr);
            sb.w_mlp2
                .apply_update(&win.embed_own[l], &win.mlp[l], &g.w_mlp2, lr);
            sb.w_mlp2.apply_sls_update(&win.embed_own[l], &g.sls_mlp, lr);
            let rin = win.embed_in[l].range();
            let rown = win.embed_own[l].range();
            sb.ln1_gamma
                .slice_mut(s![rin.clone()])
                .zip_mut_with(&g.ln1_gamma, |w, &v| *w -= lr * v);
            sb.ln1_beta
                .slice_mut(s![rin])
                .zip_mut_with(&g.ln1_beta, |w, &v| *w -= lr * v);
            sb.ln2_gamma
                .slice_mut(s![rown.clone()])
                .zip_mut_with(&g.ln2_gamma, |w, &v| *w -= lr * v);
            sb.ln2_beta
                .slice_mut(s![rown])
                .zip_mut_with(&g.ln2_beta, |w, &v| *w -= lr * v);
        }
        {
            let rlast = win.embed_own[config.depth - 1].range();
            let mut target = self.head.slice_mut(s![.., rlast]);
            target.zip_mut_with(&grads.head, |w, &g| *w -= lr * g);
        }
        Ok(())
    }

    /// Every latent value in a fixed order, for bitwise freeze checks.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        out.push(("patch".into(), self.patch.iter().copied().collect()));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.w_q"), b.w_q.values()));
            out.push((format!("block{l}.w_k"), b.w_k.values()));
            out.push((format!("block{l}.w_v"), b.w_v.values()));
            out.push((format!("block{l}.w_proj"), b.w_proj.values()));
            out.push((format!("block{l}.w_mlp1"), b.w_mlp1.values()));
            out.push((format!("block{l}.w_mlp2"), b.w_mlp2.values()));
            out.push((format!("block{l}.ln1_gamma"), b.ln1_gamma.to_vec()));
            out.push((format!("block{l}.ln1_beta"), b.ln1_beta.to_vec()));
            out.push((format!("block{l}.ln2_gamma"), b.ln2_gamma.to_vec()));
            out.push((format!("block{l}.ln2_beta"), b.ln2_beta.to_vec()));
        }
        out.push(("head".into(), self.head.iter().copied().collect()));
        out
    }

    /// All row precision tags in snapshot order, for immutability checks.
    pub fn zone_snapshot(&self) -> Vec<Vec<PrecisionTag>> {
        self.blocks
            .iter()
            .flat_map(|b| {
                [&b.w_q, &b.w_k, &b.w_v, &b.w_proj, &b.w_mlp1, &b.w_mlp2]
                    .into_iter()
                    .map(|layer| (0..layer.super_rows()).map(|r| layer.zone_tag(r)).collect())
            })
            .collect()
    }

    /// Boolean mask aligned with [`Supernet::snapshot`]: true where the config's
    /// windows may write.
    pub fn window_footprint(&self, config: &SubnetConfig) -> Result<BTreeMap<String, Vec<bool>>> {
        let win = self.windows(config)?;
        let mut out = BTreeMap::new();

        let mark2 = |rows: &WindowSelection,
                     cols: &WindowSelection,
                     shape: (usize, usize),
                     mask: &mut Vec<bool>| {
            for r in rows.range() {
                for c in cols.range() {
                    mask[r * shape.1 + c] = true;
                }
            }
        };
        let full_cols = |n: usize| WindowSelection {
            offset: 0,
            len: n,
            w8_len: 0,
        };

        let mut patch_mask = vec![false; self.patch.len()];
        mark2(
            &win.embed_in[0],
            &full_cols(self.arch.token_dim),
            (self.patch.nrows(), self.patch.ncols()),
            &mut patch_mask,
        );
        out.insert("patch".into(), patch_mask);

        for (l, b) in self.blocks.iter().enumerate() {
            let active = l < config.depth;
            let layer_mask = |layer: &EntangledLayer,
                              rows: Option<&WindowSelection>,
                              cols: Option<&WindowSelection>| {
                let mut mask = vec![false; layer.latent.len() + layer.sls.as_ref().map_or(0, |s| s.len())];
                if let (Some(r), Some(c)) = (rows, cols) {
                    for ri in r.range() {
                        for ci in c.range() {
                            mask[ri * layer.super_cols() + ci] = true;
                        }
                    }
                    if layer.sls.is_some() {
                        for ri in r.range() {
                            mask[layer.latent.len() + ri] = true;
                        }
                    }
                }
                mask
            };
            let (rh, re_in, re_own, rm) = if active {
                (
                    Some(&win.hidden[l]),
                    Some(&win.embed_in[l]),
                    Some(&win.embed_own[l]),
                    Some(&win.mlp[l]),
                )
            } else {
                (None, None, None, None)
            };
            out.insert(format!("block{l}.w_q"), layer_mask(&b.w_q, rh, re_in));
            out.insert(format!("block{l}.w_k"), layer_mask(&b.w_k, rh, re_in));
            out.insert(format!("block{l}.w_v"), layer_mask(&b.w_v, rh, re_in));
            out.insert(format!("block{l}.w_proj"), layer_mask(&b.w_proj, re_own, rh));
            out.insert(format!("block{l}.w_mlp1"), layer_mask(&b.w_mlp1, rm, re_own));
            out.insert(format!("block{l}.w_mlp2"), layer_mask(&b.w_mlp2, re_own, rm));
            let vec_mask = |w: Option<&WindowSelection>, n: usize| {
                let mut m = vec![false; n];
                if let Some(w) = w {
                    for i in w.range() {
                        m[i] = true;
                    }
                }
                m
            };
            let n = b.ln1_gamma.len();
            out.insert(format!("block{l}.ln1_gamma"), vec_mask(re_in, n));
            out.insert(format!("block{l}.ln1_beta"), vec_mask(re_in, n));
            out.insert(format!("block{l}.ln2_gamma"), vec_mask(re_own, n));
            out.insert(format!("block{l}.ln2_beta"), vec_mask(re_own, n));
        }

        let mut head_mask = vec![false; self.head.len()];
        let rlast = &win.embed_own[config.depth - 1];
        for r in 0..self.head.nrows() {
            for c in rlast.range() {
                head_mask[r * self.head.ncols() + c] = true;
            }
        }
        out.insert("head".into(), head_mask);
        Ok(out)
    }

    /// One-shot accuracy of a subnet with inherited weights.
    pub fn subnet_accuracy(
        &self,
        config: &SubnetConfig,
        dataset: &SyntheticDataset,
        split: Split,
    ) -> Result<f64> {
        let (params, cfg) = self.extract(config, QuantKind::Full)?;
        let (x, y) = dataset.batch(dataset.indices(split));
        evaluate(&params, &cfg, &x, &y)
    }
}

/// Supernet training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupernetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub kd_alpha: f64,
    pub kd_tau: f64,
}

impl Default for SupernetTrainConfig {
    fn default() -> Self {
        SupernetTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            seed: 0,
            kd_alpha: 0.0,
            kd_tau: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Cosine-decayed step size from lr down to zero.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = step as f64 / total_steps as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One-subnet-per-iteration supernet training: sample a quantized subnet,
/// extract its windows, run forward/backward with the optional distillation
/// loss, and update only the windowed entries.
pub fn train_supernet(
    supernet: &mut Supernet,
    dataset: &SyntheticDataset,
    cfg: &SupernetTrainConfig,
    teacher_logits: Option<&Array2<f64>>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_idx: Vec<usize> = dataset.indices(Split::Train).to_vec();
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let config = sample_subnet(&supernet.space, &mut rng);
            let (params, model_cfg) = supernet.extract(&config, QuantKind::Full)?;
            let (x, y) = dataset.batch(batch_idx);
            let (logits, cache) = forward(&params, &model_cfg, &x)?;
            let kd = KdConfig {
                alpha: if teacher_logits.is_some() { cfg.kd_alpha } else { 0.0 },
                tau: cfg.kd_tau,
                teacher_logits: teacher_logits.map(|t| {
                    let mut rows = Array2::zeros((batch_idx.len(), t.ncols()));
                    for (bi, &i) in batch_idx.iter().enumerate() {
                        rows.row_mut(bi).assign(&t.row(i));
                    }
                    rows
                }),
            };
            let (loss, dlogits) = kd_loss(&logits, &y, &kd)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = backward(&params, &model_cfg, &cache, &dlogits);
            let lr = cosine_lr(cfg.lr, step, total_steps);
            supernet.apply_gradients(&config, &grads, lr)?;
            epoch_loss += loss;
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::info!("supernet epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        steps: step,
        epoch_losses,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    space: SearchSpace,
    arch: ModelArch,
    act_bits: u32,
    dims: SuperDims,
    depth_max: usize,
    tensors: Vec<String>,
}

fn tensor_names(depth_max: usize) -> Vec<String> {
    let mut names = vec!["patch".to_string()];
    for l in 0..depth_max {
        for t in [
            "w_q", "w_k", "w_v", "w_proj", "sls_msa", "w_mlp1", "w_mlp2", "sls_mlp",
            "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
        ] {
            names.push(format!("block{l}.{t}"));
        }
    }
    names.push("head".to_string());
    names
}

impl Supernet {
    fn tensor_by_name(&self, name: &str) -> Option<QvtTensor> {
        if name == "patch" {
            return Some(QvtTensor::from_f64(&self.patch));
        }
        if name == "head" {
            return Some(QvtTensor::from_f64(&self.head));
        }
        let (block, field) = name.strip_prefix("block")?.split_once('.')?;
        let b = self.blocks.get(block.parse::<usize>().ok()?)?;
        let t = match field {
            "w_q" => QvtTensor::from_f64(&b.w_q.latent),
            "w_k" => QvtTensor::from_f64(&b.w_k.latent),
            "w_v" => QvtTensor::from_f64(&b.w_v.latent),
            "w_proj" => QvtTensor::from_f64(&b.w_proj.latent),
            "w_mlp1" => QvtTensor::from_f64(&b.w_mlp1.latent),
            "w_mlp2" => QvtTensor::from_f64(&b.w_mlp2.latent),
            "sls_msa" => QvtTensor::from_f64(b.w_proj.sls.as_ref()?),
            "sls_mlp" => QvtTensor::from_f64(b.w_mlp2.sls.as_ref()?),
            "ln1_gamma" => QvtTensor::from_f64(&b.ln1_gamma),
            "ln1_beta" => QvtTensor::from_f64(&b.ln1_beta),
            "ln2_gamma" => QvtTensor::from_f64(&b.ln2_gamma),
            "ln2_beta" => QvtTensor::from_f64(&b.ln2_beta),
            _ => return None,
        };
        Some(t)
    }

    /// Writes the checkpoint as a directory of QVT tensors plus a JSON
    /// manifest. f64 latents truncate to f32 on disk.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let names = tensor_names(self.blocks.len());
        for name in &names {
            let t = self
                .tensor_by_name(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown tensor {name}")))?;
            write_qvt(&dir.join(format!("{name}.qvt")), &t)?;
        }
        let manifest = CheckpointManifest {
            format_version: 1,
            space: self.space.clone(),
            arch: self.arch,
            act_bits: self.act_bits,
            dims: self.dims,
            depth_max: self.blocks.len(),
            tensors: names,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = crate::error::read_file(&mpath)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(mpath.display().to_string(), e))?;
        let mut net = Supernet::new(manifest.space, manifest.arch, manifest.act_bits, 0)?;
        if net.dims != manifest.dims || net.blocks.len() != manifest.depth_max {
            return Err(Error::InvalidConfig(
                "checkpoint geometry does not match its search space".into(),
            ));
        }
        let read2 = |name: &str| -> Result<Array2<f64>> {
            let t = read_qvt(&dir.join(format!("{name}.qvt")))?.to_f64()?;
            t.into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::ShapeMismatch(e.to_string()))
        };
        let read1 = |name: &str| -> Result<Array1<f64>> {
            let t = read_qvt(&dir.join(format!("{name}.qvt")))?.to_f64()?;
            t.into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| Error::ShapeMismatch(e.to_string()))
        };
        net.patch = read2("patch")?;
        net.head = read2("head")?;
        for l in 0..net.blocks.len() {
            let b = &mut net.blocks[l];
            b.w_q.latent = read2(&format!("block{l}.w_q"))?;
            b.w_k.latent = read2(&format!("block{l}.w_k"))?;
            b.w_v.latent = read2(&format!("block{l}.w_v"))?;
            b.w_proj.latent = read2(&format!("block{l}.w_proj"))?;
            b.w_proj.sls = Some(read1(&format!("block{l}.sls_msa"))?);
            b.w_mlp1.latent = read2(&format!("block{l}.w_mlp1"))?;
            b.w_mlp2.latent = read2(&format!("block{l}.w_mlp2"))?;
            b.w_mlp2.sls = Some(read1(&format!("block{l}.sls_mlp"))?);
            b.ln1_gamma = read1(&format!("block{l}.ln1_gamma"))?;
            b.ln1_beta = read1(&format!("block{l}.ln1_beta"))?;
            b.ln2_gamma = read1(&format!("block{l}.ln2_gamma"))?;
            b.ln2_beta = read1(&format!("block{l}.ln2_beta"))?;
        }
        Ok(net)
    }
}
