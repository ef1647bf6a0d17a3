//! Analytical FPGA resource allocation and tile-level latency modeling.
//!
//! The resource model picks a compute strategy (which DSP packing factor to
//! use and whether to add pure-LUT multipliers) from the device budgets and
//! the per-multiplication cost table, classifying the profile into one of
//! three situations by how much LUT budget is available relative to what
//! full DSP packing would consume. The latency model counts clock cycles for
//! double-buffered tiled GEMMs and converts totals to frames per second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::{ModelArch, SubnetConfig};

/// Device capacities, utilization thresholds, transfer-packing widths, AXI
/// port counts, and clock frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub s_dsp: u64,
    pub s_lut: u64,
    pub gamma_dsp: f64,
    pub gamma_lut: f64,
    pub axi_in: u64,
    pub axi_wgt: u64,
    pub axi_out: u64,
    pub d_act: u64,
    pub d_wgt: u64,
    pub freq_hz: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.s_dsp,
            self.s_lut,
            self.axi_in,
            self.axi_wgt,
            self.axi_out,
            self.d_act,
            self.d_wgt,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig(
                "hardware profile counts must be positive".into(),
            ));
        }
        for (name, g) in [("gamma_dsp", self.gamma_dsp), ("gamma_lut", self.gamma_lut)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1]")));
            }
        }
        if self.freq_hz.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidConfig("freq_hz must be positive".into()));
        }
        Ok(())
    }

    pub fn dsp_budget(&self) -> f64 {
        self.s_dsp as f64 * self.gamma_dsp
    }

    pub fn lut_budget(&self) -> f64 {
        self.s_lut as f64 * self.gamma_lut
    }
}

/// Quantization mode of the basic compute unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    #[serde(rename = "w4a6")]
    W4A6,
    /// 8-bit weights composed from two 4-bit operations.
    #[serde(rename = "w8a6")]
    W8A6,
    /// 8-bit weights multiplied directly, no decomposition. Kept in the cost
    /// table as a baseline; not emulated.
    #[serde(rename = "w8a6_direct")]
    W8A6Direct,
}

/// LUT/DSP cost of one multiplication for one implementation choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitCost {
    pub c_lut: f64,
    pub c_dsp: f64,
}

/// Per-multiplication costs of each implementation, per quantization mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCosts {
    pub pure_lut: UnitCost,
    pub pack3: UnitCost,
    pub pack4: UnitCost,
}

/// Characterized resource consumption of a single basic compute unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub w4a6: ModeCosts,
    pub w8a6: ModeCosts,
    pub w8a6_direct: ModeCosts,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            w4a6: ModeCosts {
                pure_lut: UnitCost { c_lut: 33.3, c_dsp: 0.0 },
                pack3: UnitCost { c_lut: 10.9, c_dsp: 0.33 },
                pack4: UnitCost { c_lut: 12.9, c_dsp: 0.25 },
            },
            w8a6: ModeCosts {
                pure_lut: UnitCost { c_lut: 66.7, c_dsp: 0.0 },
                pack3: UnitCost { c_lut: 21.9, c_dsp: 0.67 },
                pack4: UnitCost { c_lut: 25.8, c_dsp: 0.5 },
            },
            // The direct mode has one DSP implementation; both packing slots
            // carry the same characterized cost.
            w8a6_direct: ModeCosts {
                pure_lut: UnitCost { c_lut: 62.2, c_dsp: 0.0 },
                pack3: UnitCost { c_lut: 21.5, c_dsp: 0.5 },
                pack4: UnitCost { c_lut: 21.5, c_dsp: 0.5 },
            },
        }
    }
}

impl CostTable {
    pub fn mode(&self, mode: QuantMode) -> &ModeCosts {
        match mode {
            QuantMode::W4A6 => &self.w4a6,
            QuantMode::W8A6 => &self.w8a6,
            QuantMode::W8A6Direct => &self.w8a6_direct,
        }
    }

    /// Validates the LUT-cost ordering c_lut(pack3) < c_lut(pack4) <
    /// c_lut(pure) for the composed modes; the direct mode has a single DSP
    /// implementation, which only needs to be cheaper than pure LUT.
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("w4a6", &self.w4a6), ("w8a6", &self.w8a6)] {
            if !(m.pack3.c_lut < m.pack4.c_lut && m.pack4.c_lut < m.pure_lut.c_lut) {
                return Err(Error::InvalidConfig(format!(
                    "{name}: LUT costs must satisfy pack3 < pack4 < pure-LUT"
                )));
            }
        }
        let d = &self.w8a6_direct;
        if d.pack3.c_lut >= d.pure_lut.c_lut || d.pack3 != d.pack4 {
            return Err(Error::InvalidConfig(
                "w8a6_direct: DSP cost must be a single implementation cheaper than pure LUT"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Multiplications one DSP carries per packing factor, given the mode.
/// Composed 8-bit weights consume two 4-bit lanes per multiplication.
fn mults_per_dsp(mode: QuantMode, factor: Packing) -> f64 {
    let lanes = match factor {
        Packing::Factor3 => 3.0,
        Packing::Factor4 => 4.0,
    };
    match mode {
        QuantMode::W4A6 => lanes,
        QuantMode::W8A6 => lanes / 2.0,
        QuantMode::W8A6Direct => 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Packing {
    Factor3,
    Factor4,
}

/// Which rule decides the packing factor inside Situations 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyRule {
    /// The comparison inequalities as printed in the characterization.
    #[default]
    Standard,
    /// Re-derivation from the throughput objective: prefer factor 4 when
    /// 4*c_lut(pack4) - 3*c_lut(pack3) <= c_lut(pure).
    Derived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComputeStrategy {
    Pack3Only,
    Pack3PlusLut,
    Pack4Only,
    Pack4PlusLut,
}

/// LUT-budget regime relative to full DSP packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    /// LUTs cannot even feed full factor-3 packing.
    One,
    /// LUTs cover full factor-4 packing with headroom for pure-LUT units.
    Two,
    /// LUTs sit between the factor-3 and factor-4 demands.
    Three,
}

/// A resolved allocation of parallel multipliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputePlan {
    pub mode: QuantMode,
    pub strategy: ComputeStrategy,
    pub situation: Situation,
    /// Multiplications executed on DSPs.
    pub n_dsp: u64,
    /// Multiplications executed on pure-LUT units.
    pub n_lut: u64,
    pub n_tot: u64,
    /// Physical DSPs consumed (n_dsp / multiplications-per-DSP).
    pub dsp_used: f64,
    /// LUTs consumed by DSP-side packing plus pure-LUT multipliers.
    pub lut_used: f64,
}

fn packing_of(strategy: ComputeStrategy) -> Packing {
    match strategy {
        ComputeStrategy::Pack3Only | ComputeStrategy::Pack3PlusLut => Packing::Factor3,
        ComputeStrategy::Pack4Only | ComputeStrategy::Pack4PlusLut => Packing::Factor4,
    }
}

/// Largest n with n*unit <= budget, robust to floating-point rounding.
fn floor_within(budget: f64, unit: f64) -> u64 {
    if unit <= 0.0 {
        return 0;
    }
    let mut n = (budget / unit).floor().max(0.0) as u64;
    while n > 0 && n as f64 * unit > budget {
        n -= 1;
    }
    n
}

/// Picks the compute strategy for the given budgets and costs.
///
/// The profile is classified by its LUT budget: below the full factor-3
/// packing demand (Situation 1) DSP packing is allocated until LUTs run out;
/// above the full factor-4 demand (Situation 2) the packing factor is chosen
/// by the comparison rule and remaining LUTs become pure-LUT multipliers;
/// in between (Situation 3) the rule picks either factor-4-only, capped by
/// LUTs, or factor 3 plus pure-LUT units.
pub fn select_compute_strategy(
    profile: &HardwareProfile,
    costs: &CostTable,
    mode: QuantMode,
    rule: StrategyRule,
) -> Result<ComputePlan> {
    profile.validate()?;
    costs.validate()?;
    let m = costs.mode(mode);
    let (c3, c4, cl) = (m.pack3.c_lut, m.pack4.c_lut, m.pure_lut.c_lut);
    let dsp_budget = profile.dsp_budget();
    let lut_budget = profile.lut_budget();

    let full3 = mults_per_dsp(mode, Packing::Factor3) * dsp_budget;
    let full4 = mults_per_dsp(mode, Packing::Factor4) * dsp_budget;

    let prefer_pack4 = |situation: Situation| -> bool {
        match rule {
            StrategyRule::Derived => 4.0 * c4 - 3.0 * c3 <= cl,
            StrategyRule::Standard => match situation {
                // Full-packing regime: compare the LUT overhead delta of the
                // two factors against the LUT budget weighted by the pure
                // unit cost.
                Situation::Two => (4.0 * c4 - 3.0 * c3) * dsp_budget <= lut_budget * cl,
                // LUT-bound regime: factor-3-plus-LUT multiplier count
                // against the LUT-capped factor-4 count.
                Situation::Three => {
                    (lut_budget + 3.0 * dsp_budget * (cl - c3)) / cl <= lut_budget / c4
                }
                Situation::One => false,
            },
        }
    };

    let (situation, strategy) = if lut_budget <= full3 * c3 {
        (Situation::One, ComputeStrategy::Pack3Only)
    } else if full4 * c4 <= lut_budget {
        let s = if prefer_pack4(Situation::Two) {
            ComputeStrategy::Pack4PlusLut
        } else {
            ComputeStrategy::Pack3PlusLut
        };
        (Situation::Two, s)
    } else {
        let s = if prefer_pack4(Situation::Three) {
            ComputeStrategy::Pack4Only
        } else {
            ComputeStrategy::Pack3PlusLut
        };
        (Situation::Three, s)
    };

    let packing = packing_of(strategy);
    let per_dsp = mults_per_dsp(mode, packing);
    let c_dsp_lut = match packing {
        Packing::Factor3 => c3,
        Packing::Factor4 => c4,
    };

    // DSP multipliers: the packed capacity of the DSP budget, capped by the
    // LUT overhead those units themselves consume.
    let n_dsp = floor_within(dsp_budget * per_dsp, 1.0).min(floor_within(lut_budget, c_dsp_lut));
    let lut_after_dsp = lut_budget - n_dsp as f64 * c_dsp_lut;
    let n_lut = match strategy {
        ComputeStrategy::Pack3Only | ComputeStrategy::Pack4Only => 0,
        ComputeStrategy::Pack3PlusLut | ComputeStrategy::Pack4PlusLut => {
            floor_within(lut_after_dsp, cl)
        }
    };

    let n_tot = n_dsp + n_lut;
    if n_tot == 0 {
        return Err(Error::InfeasibleProfile);
    }
    Ok(ComputePlan {
        mode,
        strategy,
        situation,
        n_dsp,
        n_lut,
        n_tot,
        dsp_used: n_dsp as f64 / per_dsp,
        lut_used: n_dsp as f64 * c_dsp_lut + n_lut as f64 * cl,
    })
}

/// GEMM dimensions of one modeled layer: M output channels, N input
/// channels, F token positions, N_h heads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerShape {
    pub m: u64,
    pub n: u64,
    pub f: u64,
    pub n_h: u64,
}

impl LayerShape {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.f == 0 || self.n_h == 0 {
            return Err(Error::InvalidConfig("layer dimensions must be positive".into()));
        }
        if !self.n.is_multiple_of(self.n_h) {
            return Err(Error::InvalidConfig(format!(
                "input channels {} not divisible by {} heads",
                self.n, self.n_h
            )));
        }
        Ok(())
    }
}

/// On-chip working-block sizes: T_n input channels, T_m output channels,
/// and the token-dimension parallel factor P_F.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub t_n: u64,
    pub t_m: u64,
    pub p_f: u64,
}

impl TileConfig {
    pub fn validate(&self, shape: &LayerShape) -> Result<()> {
        if self.t_n == 0 || self.t_n > shape.n || self.t_m == 0 || self.t_m > shape.m {
            return Err(Error::InvalidConfig(format!(
                "tile ({}, {}) invalid for layer {}x{}",
                self.t_n, self.t_m, shape.m, shape.n
            )));
        }
        if self.p_f == 0 || self.p_f > shape.f {
            return Err(Error::InvalidConfig(format!(
                "parallel factor {} invalid for {} tokens",
                self.p_f, shape.f
            )));
        }
        Ok(())
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Per-tile cycle counts: input transfer, weight transfer, output transfer,
/// and compute.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TileCycles {
    pub l_in: u64,
    pub l_wgt: u64,
    pub l_out: u64,
    pub l_cmpt: u64,
}

pub fn tile_cycles(
    shape: &LayerShape,
    tile: &TileConfig,
    profile: &HardwareProfile,
    plan: &ComputePlan,
) -> TileCycles {
    let l_in = ceil_div(tile.t_n, profile.d_act) * ceil_div(shape.f, profile.axi_in);
    let l_wgt = ceil_div(tile.t_n, profile.d_wgt) * ceil_div(tile.t_m, profile.axi_wgt);
    let l_out = ceil_div(tile.t_m, profile.d_act) * ceil_div(shape.f, profile.axi_out);
    let l_cmpt = ceil_div(shape.f, tile.p_f).max(ceil_div(tile.t_n * tile.t_m * shape.f, plan.n_tot));
    TileCycles {
        l_in,
        l_wgt,
        l_out,
        l_cmpt,
    }
}

/// Total clock cycles for one layer under double-buffered tiling:
/// L1 = max(L_in, L_wgt, L_cmpt) per input tile, then
/// L2 = max(L1 * ceil(N/T_n) + L_cmpt, L_out) per output tile, and
/// ceil(M/T_m) output tiles plus the final store.
pub fn layer_cycles(
    shape: &LayerShape,
    tile: &TileConfig,
    profile: &HardwareProfile,
    plan: &ComputePlan,
) -> u64 {
    let t = tile_cycles(shape, tile, profile, plan);
    let l1 = t.l_in.max(t.l_wgt).max(t.l_cmpt);
    let l2 = (l1 * ceil_div(shape.n, tile.t_n) + t.l_cmpt).max(t.l_out);
    ceil_div(shape.m, tile.t_m) * l2 + t.l_out
}

/// Candidate tile sizes: powers of two up to the dimension, plus the
/// dimension itself.
fn tile_candidates(dim: u64) -> Vec<u64> {
    let mut v = Vec::new();
    let mut p = 1u64;
    while p <= dim {
        v.push(p);
        p *= 2;
    }
    if *v.last().unwrap() != dim {
        v.push(dim);
    }
    v
}

/// Grid-searches (T_n, T_m, P_F) over powers of two minimizing the layer's
/// cycle count. Deterministic: the first minimum in grid order wins.
pub fn auto_tile(
    shape: &LayerShape,
    profile: &HardwareProfile,
    plan: &ComputePlan,
) -> (TileConfig, u64) {
    let mut best: Option<(TileConfig, u64)> = None;
    for &t_n in &tile_candidates(shape.n) {
        for &t_m in &tile_candidates(shape.m) {
            for &p_f in &tile_candidates(shape.f) {
                let tile = TileConfig { t_n, t_m, p_f };
                let cycles = layer_cycles(shape, &tile, profile, plan);
                if best.as_ref().is_none_or(|(_, c)| cycles < *c) {
                    best = Some((tile, cycles));
                }
            }
        }
    }
    best.expect("dimension candidates are never empty")
}

/// One expanded GEMM in the per-layer schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPlanEntry {
    pub name: String,
    pub shape: LayerShape,
    /// How many identical instances run (heads for split attention layers).
    pub count: u64,
    pub tile: TileConfig,
    pub cycles: TileCycles,
    /// Cycles for one instance.
    pub l_tot: u64,
    /// Cycles including the instance count.
    pub total_cycles: u64,
}

/// Expands a subnet into its GEMM layer list. Attention score and
/// attention-value matmuls carry n_h > 1 and split into n_h independent
/// per-head matmuls of shape (M/N_h, N/N_h, F); QKV, projection, and MLP
/// layers stay whole.
pub fn expand_layers(config: &SubnetConfig, arch: &ModelArch) -> Result<Vec<(String, LayerShape)>> {
    config.validate_against(arch)?;
    let e = config.embed_dim as u64;
    let f = arch.tokens as u64;
    let heads = arch.num_heads as u64;
    let mut layers = Vec::new();
    for (l, &h) in config.hidden_dims.iter().enumerate() {
        let h = h as u64;
        let mh = config.mlp_hidden(l) as u64;
        layers.push((
            format!("block{l}.qkv"),
            LayerShape { m: 3 * h, n: e, f, n_h: 1 },
        ));
        layers.push((
            format!("block{l}.attn_score"),
            LayerShape { m: heads * f, n: h, f, n_h: heads },
        ));
        layers.push((
            format!("block{l}.attn_value"),
            LayerShape { m: h, n: heads * f, f, n_h: heads },
        ));
        layers.push((
            format!("block{l}.proj"),
            LayerShape { m: e, n: h, f, n_h: 1 },
        ));
        layers.push((
            format!("block{l}.mlp1"),
            LayerShape { m: mh, n: e, f, n_h: 1 },
        ));
        layers.push((
            format!("block{l}.mlp2"),
            LayerShape { m: e, n: mh, f, n_h: 1 },
        ));
    }
    layers.push((
        "head".into(),
        LayerShape { m: arch.num_classes as u64, n: e, f: 1, n_h: 1 },
    ));
    Ok(layers)
}

/// Latency estimate for a whole subnet.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpsEstimate {
    pub fps: f64,
    pub total_cycles: u64,
    pub layers: Vec<LayerPlanEntry>,
}

/// Sums per-layer cycles over the expanded schedule and converts to FPS at
/// the profile's clock. Tiles may be supplied per expanded layer; otherwise
/// each layer is auto-tiled.
pub fn estimate_fps(
    config: &SubnetConfig,
    arch: &ModelArch,
    profile: &HardwareProfile,
    plan: &ComputePlan,
    tiles: Option<&[TileConfig]>,
) -> Result<FpsEstimate> {
    let shapes = expand_layers(config, arch)?;
    if let Some(ts) = tiles {
        if ts.len() != shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tiles supplied for {} layers",
                ts.len(),
                shapes.len()
            )));
        }
    }
    let mut entries = Vec::with_capacity(shapes.len());
    let mut total: u64 = 0;
    for (idx, (name, shape)) in shapes.into_iter().enumerate() {
        shape.validate()?;
        if shape.n_h > 1 && !shape.m.is_multiple_of(shape.n_h) {
            return Err(Error::InvalidConfig(format!(
                "output channels {} not divisible by {} heads",
                shape.m, shape.n_h
            )));
        }
        // Attention layers split into n_h identical per-head matmuls.
        let count = shape.n_h;
        let per_head_shape = LayerShape {
            m: shape.m / shape.n_h,
            n: shape.n / shape.n_h,
            f: shape.f,
            n_h: 1,
        };
        let tile = match tiles {
            Some(ts) => {
                ts[idx].validate(&per_head_shape)?;
                ts[idx]
            }
            None => auto_tile(&per_head_shape, profile, plan).0,
        };
        let cycles = tile_cycles(&per_head_shape, &tile, profile, plan);
        let l_tot = layer_cycles(&per_head_shape, &tile, profile, plan);
        let total_cycles = l_tot * count;
        total += total_cycles;
        entries.push(LayerPlanEntry {
            name,
            shape,
            count,
            tile,
            cycles,
            l_tot,
            total_cycles,
        });
    }
    Ok(FpsEstimate {
        fps: fps_from_cycles(profile.freq_hz, total),
        total_cycles: total,
        layers: entries,
    })
}

pub fn fps_from_cycles(freq_hz: f64, total_cycles: u64) -> f64 {
    freq_hz / total_cycles as f64
}

/// Consumed-over-available utilization fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResourceReport {
    pub dsp_utilization: f64,
    pub lut_utilization: f64,
}

pub fn resource_report(plan: &ComputePlan, profile: &HardwareProfile) -> ResourceReport {
    ResourceReport {
        dsp_utilization: plan.dsp_used / profile.s_dsp as f64,
        lut_utilization: plan.lut_used / profile.s_lut as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(s_dsp: u64, s_lut: u64) -> HardwareProfile {
        HardwareProfile {
            s_dsp,
            s_lut,
            gamma_dsp: 1.0,
            gamma_lut: 1.0,
            axi_in: 2,
            axi_wgt: 2,
            axi_out: 2,
            d_act: 2,
            d_wgt: 2,
            freq_hz: 150e6,
        }
    }

    #[test]
    fn default_costs_match_characterization_and_ordering() {
        let t = CostTable::default();
        t.validate().unwrap();
        assert_eq!(t.w4a6.pack3, UnitCost { c_lut: 10.9, c_dsp: 0.33 });
        assert_eq!(t.w4a6.pack4, UnitCost { c_lut: 12.9, c_dsp: 0.25 });
        assert_eq!(t.w4a6.pure_lut, UnitCost { c_lut: 33.3, c_dsp: 0.0 });
        assert_eq!(t.w8a6.pack3, UnitCost { c_lut: 21.9, c_dsp: 0.67 });
        assert_eq!(t.w8a6.pack4, UnitCost { c_lut: 25.8, c_dsp: 0.5 });
        assert_eq!(t.w8a6.pure_lut, UnitCost { c_lut: 66.7, c_dsp: 0.0 });
        assert_eq!(t.w8a6_direct.pack3, UnitCost { c_lut: 21.5, c_dsp: 0.5 });
        assert_eq!(t.w8a6_direct.pure_lut, UnitCost { c_lut: 62.2, c_dsp: 0.0 });
    }

    #[test]
    fn bad_cost_ordering_is_rejected() {
        let mut t = CostTable::default();
        t.w4a6.pack4.c_lut = 9.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn situation_one_fixture() {
        // LUT budget 3000 <= 3*100*10.9 = 3270.
        let plan = select_compute_strategy(
            &profile(100, 3000),
            &CostTable::default(),
            QuantMode::W4A6,
            StrategyRule::Standard,
        )
        .unwrap();
        assert_eq!(plan.situation, Situation::One);
        assert_eq!(plan.strategy, ComputeStrategy::Pack3Only);
        // min(300, floor(3000/10.9) = 275) = 275 multipliers, no LUT units.
        assert_eq!(plan.n_dsp, 275);
        assert_eq!(plan.n_lut, 0);
        assert_eq!(plan.n_tot, 275);
    }

    #[test]
    fn situation_two_fixture() {
        // 4*100*12.9 = 5160 <= 100000; the comparison rule picks factor 4:
        // (4*12.9 - 3*10.9)*100 = 1890 <= 100000*33.3.
        let plan = select_compute_strategy(
            &profile(100, 100_000),
            &CostTable::default(),
            QuantMode::W4A6,
            StrategyRule::Standard,
        )
        .unwrap();
        assert_eq!(plan.situation, Situation::Two);
        assert_eq!(plan.strategy, ComputeStrategy::Pack4PlusLut);
        assert_eq!(plan.n_dsp, 400);
        // floor((100000 - 5160) / 33.3) = 2848.
        assert_eq!(plan.n_lut, 2848);
        assert_eq!(plan.n_tot, 3248);
    }

    #[test]
    fn situation_three_fixture() {
        // 3270 <= 4000 <= 5160; the LUT-bound comparison:
        // (4000 + 3*100*(33.3-10.9))/33.3 = 321.9 > 4000/12.9 = 310.1,
        // so factor 3 plus pure-LUT units wins.
        let plan = select_compute_strategy(
            &profile(100, 4000),
            &CostTable::default(),
            QuantMode::W4A6,
            StrategyRule::Standard,
        )
        .unwrap();
        assert_eq!(plan.situation, Situation::Three);
        assert_eq!(plan.strategy, ComputeStrategy::Pack3PlusLut);
        assert_eq!(plan.n_dsp, 300);
        // floor((4000 - 300*10.9)/33.3) = floor(730/33.3) = 21.
        assert_eq!(plan.n_lut, 21);
        assert_eq!(plan.n_tot, 321);
    }

    #[test]
    fn derived_rule_prefers_pack4_with_default_costs() {
        // 4*12.9 - 3*10.9 = 18.9 <= 33.3 holds, so both situations 2 and 3
        // pick factor 4 under the derived rule.
        let plan = select_compute_strategy(
            &profile(100, 4000),
            &CostTable::default(),
            QuantMode::W4A6,
            StrategyRule::Derived,
        )
        .unwrap();
        assert_eq!(plan.strategy, ComputeStrategy::Pack4Only);
        // LUT-capped: floor(4000/12.9) = 310.
        assert_eq!(plan.n_dsp, 310);
        assert_eq!(plan.n_lut, 0);
    }

    #[test]
    fn resource_constraints_hold_for_every_plan() {
        let costs = CostTable::default();
        for s_dsp in [8u64, 100, 911, 2520] {
            for s_lut in [500u64, 3000, 4000, 40_000, 274_080] {
                for gamma in [0.5, 0.69, 1.0] {
                    let mut p = profile(s_dsp, s_lut);
                    p.gamma_dsp = gamma;
                    p.gamma_lut = gamma;
                    for mode in [QuantMode::W4A6, QuantMode::W8A6, QuantMode::W8A6Direct] {
                        for rule in [StrategyRule::Standard, StrategyRule::Derived] {
                            let plan = select_compute_strategy(&p, &costs, mode, rule).unwrap();
                            // DSP budget, with exact per-DSP capacity.
                            assert!(
                                plan.dsp_used <= p.dsp_budget() + 1e-9,
                                "DSP overrun: {plan:?}"
                            );
                            // LUT budget with the mode's own unit costs.
                            assert!(
                                plan.lut_used <= p.lut_budget(),
                                "LUT overrun: {plan:?}"
                            );
                            assert_eq!(plan.n_tot, plan.n_dsp + plan.n_lut);
                            assert!(plan.n_tot > 0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_profile_errors() {
        // One DSP, three LUTs: not enough LUTs for any multiplier.
        let p = profile(1, 3);
        assert!(matches!(
            select_compute_strategy(&p, &CostTable::default(), QuantMode::W4A6, StrategyRule::Standard),
            Err(Error::InfeasibleProfile)
        ));
    }

    fn unit_plan(n_tot: u64) -> ComputePlan {
        ComputePlan {
            mode: QuantMode::W4A6,
            strategy: ComputeStrategy::Pack3Only,
            situation: Situation::One,
            n_dsp: n_tot,
            n_lut: 0,
            n_tot,
            dsp_used: 0.0,
            lut_used: 0.0,
        }
    }

    #[test]
    fn tile_cycle_examples() {
        let p = profile(100, 100_000);
        let shape = LayerShape { m: 4, n: 4, f: 8, n_h: 1 };
        let tile = TileConfig { t_n: 4, t_m: 4, p_f: 4 };
        let t = tile_cycles(&shape, &tile, &p, &unit_plan(64));
        // ceil(4/2)*ceil(8/2) = 8 for input and output, ceil(4/2)*ceil(4/2)=4
        // for weights, max(ceil(8/4), ceil(4*4*8/64)) = 2 to compute.
        assert_eq!((t.l_in, t.l_wgt, t.l_out, t.l_cmpt), (8, 4, 8, 2));

        let single = LayerShape { m: 1, n: 1, f: 1, n_h: 1 };
        let tiny = TileConfig { t_n: 1, t_m: 1, p_f: 1 };
        let mut p1 = p.clone();
        p1.d_act = 1;
        p1.axi_out = 1;
        let t1 = tile_cycles(&single, &tiny, &p1, &unit_plan(1));
        assert_eq!(t1.l_out, 1);
    }

    #[test]
    fn layer_cycles_hand_example() {
        // l_in=8, l_wgt=4, l_cmpt=2, l_out=8 -> L1=8, L2=max(8*1+2, 8)=10,
        // total = 1*10 + 8 = 18.
        let p = profile(100, 100_000);
        let shape = LayerShape { m: 4, n: 4, f: 8, n_h: 1 };
        let tile = TileConfig { t_n: 4, t_m: 4, p_f: 4 };
        assert_eq!(layer_cycles(&shape, &tile, &p, &unit_plan(64)), 18);
    }

    #[test]
    fn single_tile_degenerate_case() {
        let p = profile(100, 100_000);
        let shape = LayerShape { m: 4, n: 4, f: 8, n_h: 1 };
        let tile = TileConfig { t_n: 4, t_m: 4, p_f: 8 };
        let t = tile_cycles(&shape, &tile, &p, &unit_plan(1_000_000));
        let l1 = t.l_in.max(t.l_wgt).max(t.l_cmpt);
        let l2 = (l1 + t.l_cmpt).max(t.l_out);
        assert_eq!(layer_cycles(&shape, &tile, &p, &unit_plan(1_000_000)), l2 + t.l_out);
    }

    #[test]
    fn fps_fixtures() {
        assert_eq!(fps_from_cycles(150e6, 150_000), 1000.0);
        let half = fps_from_cycles(150e6, 300_000);
        assert_eq!(half, 500.0);
    }

    #[test]
    fn layer_cycles_monotone_in_dimensions() {
        let p = profile(100, 100_000);
        let plan = unit_plan(64);
        let tile = TileConfig { t_n: 2, t_m: 2, p_f: 2 };
        let base = LayerShape { m: 6, n: 6, f: 6, n_h: 1 };
        let c0 = layer_cycles(&base, &tile, &p, &plan);
        for grown in [
            LayerShape { m: 7, ..base },
            LayerShape { n: 7, ..base },
            LayerShape { f: 7, ..base },
        ] {
            assert!(layer_cycles(&grown, &tile, &p, &plan) >= c0);
        }
    }

    #[test]
    fn estimate_is_monotone_in_model_dimensions() {
        use crate::nas::{ModelArch, SubnetConfig};
        let p = profile(100, 100_000);
        let plan = unit_plan(64);
        let config = |embed: usize| SubnetConfig {
            embed_dim: embed,
            depth: 1,
            hidden_dims: vec![8],
            expansion_ratios: vec![1.0],
            mixed_ratios: vec![0.0],
        };
        let arch = |tokens: usize| ModelArch {
            tokens,
            ..ModelArch::default()
        };
        // Fixed unit tiles stay valid as dimensions grow.
        let tiles = vec![TileConfig { t_n: 1, t_m: 1, p_f: 1 }; 7];
        let base = estimate_fps(&config(8), &arch(8), &p, &plan, Some(&tiles)).unwrap();
        for est in [
            estimate_fps(&config(16), &arch(8), &p, &plan, Some(&tiles)).unwrap(),
            estimate_fps(&config(8), &arch(12), &p, &plan, Some(&tiles)).unwrap(),
        ] {
            assert!(est.fps <= base.fps);
            assert!(est.total_cycles >= base.total_cycles);
        }
        assert!(base.fps > 0.0);
        for l in &base.layers {
            assert!(l.l_tot > 0);
        }
    }

    #[test]
    fn wrong_tile_count_is_rejected() {
        use crate::nas::{ModelArch, SubnetConfig};
        let p = profile(100, 100_000);
        let plan = unit_plan(64);
        let config = SubnetConfig {
            embed_dim: 8,
            depth: 1,
            hidden_dims: vec![8],
            expansion_ratios: vec![1.0],
            mixed_ratios: vec![0.0],
        };
        // Seven expanded layers; six tiles cannot match.
        let tiles = vec![TileConfig { t_n: 1, t_m: 1, p_f: 1 }; 6];
        assert!(matches!(
            estimate_fps(&config, &ModelArch::default(), &p, &plan, Some(&tiles)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn auto_tile_minimizes_over_grid() {
        let p = profile(100, 10_000);
        let plan = select_compute_strategy(
            &p,
            &CostTable::default(),
            QuantMode::W4A6,
            StrategyRule::Standard,
        )
        .unwrap();
        let shape = LayerShape { m: 24, n: 16, f: 8, n_h: 1 };
        let (_, best) = auto_tile(&shape, &p, &plan);
        for &t_n in &tile_candidates(shape.n) {
            for &t_m in &tile_candidates(shape.m) {
                for &p_f in &tile_candidates(shape.f) {
                    let tile = TileConfig { t_n, t_m, p_f };
                    assert!(layer_cycles(&shape, &tile, &p, &plan) >= best);
                }
            }
        }
    }

    #[test]
    fn resource_report_fixtures() {
        let p = profile(100, 3000);
        // 69 physical DSPs on a 100-DSP device reports 69%.
        let plan = ComputePlan {
            dsp_used: 69.0,
            lut_used: 0.0,
            ..unit_plan(207)
        };
        let rep = resource_report(&plan, &p);
        assert!((rep.dsp_utilization - 0.69).abs() < 1e-12);

        let empty = ComputePlan { dsp_used: 0.0, lut_used: 0.0, ..unit_plan(1) };
        let rep = resource_report(&empty, &p);
        assert_eq!((rep.dsp_utilization, rep.lut_utilization), (0.0, 0.0));

        // Situation-1 fixture: 275 multipliers * 10.9 LUT / 3000 = 99.9%.
        let plan = select_compute_strategy(
            &p,
            &CostTable::default(),
            QuantMode::W4A6,
            StrategyRule::Standard,
        )
        .unwrap();
        let rep = resource_report(&plan, &p);
        assert!((rep.lut_utilization - 275.0 * 10.9 / 3000.0).abs() < 1e-12);
        assert!(rep.lut_utilization > 0.99 && rep.lut_utilization <= 1.0);
    }
}
