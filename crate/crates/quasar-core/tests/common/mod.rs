//! Independent oracles shared by the integration suites: a discrete-event
//! tile simulator for the latency model, a reference integer GEMM, and a
//! central-difference gradient probe.

use ndarray::{Array2, Array3};
use quasar_core::hw::{HardwareProfile, LayerShape, TileConfig};
use quasar_core::quant::QuantizedMatrix;
use quasar_core::vit::{backward, forward, kd_loss, KdConfig, ModelParams, ToyModelConfig};

/// Beats needed to move `items` at `per_beat` items each, counted by an
/// explicit transfer loop.
fn beats(items: u64, per_beat: u64) -> u64 {
    let mut sent = 0u64;
    let mut n = 0u64;
    while sent < items {
        sent += per_beat;
        n += 1;
    }
    n
}

/// Walks the tile schedule event by event: every input tile occupies one
/// double-buffered slot of max(load, compute) cycles, the last compute
/// drains, the store overlaps the next output tile, and the final store
/// flushes at the end.
pub fn simulate_layer_cycles(
    shape: &LayerShape,
    tile: &TileConfig,
    profile: &HardwareProfile,
    n_tot: u64,
) -> u64 {
    let mut l_in = 0u64;
    let mut loaded = 0u64;
    while loaded < tile.t_n {
        l_in += beats(shape.f, profile.axi_in);
        loaded += profile.d_act;
    }
    let mut l_wgt = 0u64;
    let mut loaded = 0u64;
    while loaded < tile.t_n {
        l_wgt += beats(tile.t_m, profile.axi_wgt);
        loaded += profile.d_wgt;
    }
    let mut l_out = 0u64;
    let mut stored = 0u64;
    while stored < tile.t_m {
        l_out += beats(shape.f, profile.axi_out);
        stored += profile.d_act;
    }
    let token_waves = beats(shape.f, tile.p_f);
    let mult_waves = beats(tile.t_n * tile.t_m * shape.f, n_tot);
    let l_cmpt = token_waves.max(mult_waves);

    let slot = l_in.max(l_wgt).max(l_cmpt);
    let mut total = 0u64;
    let mut out_tiles = 0u64;
    while out_tiles * tile.t_m < shape.m {
        let mut inner = 0u64;
        let mut in_tiles = 0u64;
        while in_tiles * tile.t_n < shape.n {
            inner += slot;
            in_tiles += 1;
        }
        inner += l_cmpt;
        total += inner.max(l_out);
        out_tiles += 1;
    }
    total + l_out
}

/// Plain integer GEMM: out[i][f] = sum_j codes[i][j] * act[j][f].
pub fn reference_gemm(q: &QuantizedMatrix, act: &Array2<i32>) -> Array2<i64> {
    let mut out = Array2::<i64>::zeros((q.rows(), act.ncols()));
    for i in 0..q.rows() {
        for f in 0..act.ncols() {
            let mut s = 0i64;
            for j in 0..q.cols() {
                s += q.codes[(i, j)] as i64 * act[(j, f)] as i64;
            }
            out[(i, f)] = s;
        }
    }
    out
}

pub fn ce_loss(params: &ModelParams, cfg: &ToyModelConfig, x: &Array3<f64>, y: &[usize]) -> f64 {
    let (logits, _) = forward(params, cfg, x).unwrap();
    kd_loss(&logits, y, &KdConfig::hard_labels_only()).unwrap().0
}

pub fn ce_grads(
    params: &ModelParams,
    cfg: &ToyModelConfig,
    x: &Array3<f64>,
    y: &[usize],
) -> quasar_core::vit::Gradients {
    let (logits, cache) = forward(params, cfg, x).unwrap();
    let (_, dlogits) = kd_loss(&logits, y, &KdConfig::hard_labels_only()).unwrap();
    backward(params, cfg, &cache, &dlogits)
}

/// Central difference of the cross-entropy loss along one named parameter.
pub fn central_difference(
    params: &mut ModelParams,
    cfg: &ToyModelConfig,
    x: &Array3<f64>,
    y: &[usize],
    name: &str,
    idx: usize,
    h: f64,
) -> f64 {
    let bump = |delta: f64, params: &mut ModelParams| {
        params.for_each_mut(|n, slice| {
            if n == name {
                slice[idx] += delta;
            }
        });
    };
    bump(h, params);
    let lp = ce_loss(params, cfg, x, y);
    bump(-2.0 * h, params);
    let lm = ce_loss(params, cfg, x, y);
    bump(h, params);
    (lp - lm) / (2.0 * h)
}
