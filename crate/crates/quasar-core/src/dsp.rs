//! Bit-exact emulation of the DSP48E2 multiply path and the lane-packing
//! schemes that extract several independent low-bit products from one
//! hardware multiplication.
//!
//! The primitive computes P = (A + D) x B with 27-bit A/D operands, an
//! 18-bit B operand, and a 45-bit product, all two's complement. Two packing
//! schemes are emulated:
//!
//! * factor 3 — three 4-bit weights share one 6-bit activation; the weights
//!   sit in port D at 11-bit spacing and the products land at bit offsets
//!   {0, 11, 22} of P.
//! * factor 4 — two 4-bit weights share two 6-bit activations; the weights
//!   sit in port D at offsets {0, 22} and the activations in port B at
//!   offsets {0, 11}, so the four cross products land at {0, 11, 22, 33}.
//!
//! 8-bit weights ride the same machinery after nibble decomposition: the
//! signed high nibbles go through signed lanes, the unsigned low nibbles
//! through unsigned lanes, and each product recombines as high*16 + low.
//!
//! Each 4x6-bit product needs 10 bits, so an 11-bit lane leaves one guard
//! bit; a negative lane borrows from the next-higher lane and the extractor
//! repays the borrow while walking lanes from least to most significant.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::quant::{decompose_w8, PrecisionTag, QuantizedMatrix};

const A_BITS: u32 = 27;
const D_BITS: u32 = 27;
const B_BITS: u32 = 18;
const P_BITS: u32 = 45;

const ACT_MIN: i64 = -32;
const ACT_MAX: i64 = 31;

/// Wraps to `bits`-wide two's complement.
#[inline]
fn wrap(x: i64, bits: u32) -> i64 {
    let m = 1i64 << bits;
    let half = 1i64 << (bits - 1);
    (x + half).rem_euclid(m) - half
}

fn check_range(what: &'static str, value: i64, bits: u32) -> Result<i64> {
    let lo = -(1i64 << (bits - 1));
    let hi = (1i64 << (bits - 1)) - 1;
    if value < lo || value > hi {
        return Err(Error::OutOfRange {
            what,
            value,
            lo,
            hi,
        });
    }
    Ok(value)
}

/// Input ports of one DSP multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DspOperands {
    a: i64,
    d: i64,
    b: i64,
}

impl DspOperands {
    pub fn new(a: i64, d: i64, b: i64) -> Result<Self> {
        check_range("port A", a, A_BITS)?;
        check_range("port D", d, D_BITS)?;
        check_range("port B", b, B_BITS)?;
        Ok(DspOperands { a, d, b })
    }

    pub fn a(&self) -> i64 {
        self.a
    }
    pub fn d(&self) -> i64 {
        self.d
    }
    pub fn b(&self) -> i64 {
        self.b
    }
}

/// The 45-bit product register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DspProduct {
    p: i64,
}

impl DspProduct {
    pub fn value(&self) -> i64 {
        self.p
    }
}

/// One multiply: the pre-adder sum wraps to 27 bits, the product to 45.
pub fn dsp48_mac(ops: DspOperands) -> DspProduct {
    let presum = wrap(ops.a + ops.d, D_BITS);
    DspProduct {
        p: wrap(presum * ops.b, P_BITS),
    }
}

/// Whether a packed operand lane holds a signed or an unsigned value.
/// Unsigned lanes (the low nibbles of decomposed 8-bit weights) are plain
/// bit fields; signed lanes borrow from their upper neighbour when negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneSign {
    Signed,
    Unsigned,
}

/// Bit positions of the packed lanes inside the product register.
#[derive(Debug, Clone)]
pub struct LaneLayout {
    pub lane_width_bits: u32,
    pub offsets: Vec<u32>,
    pub signedness: Vec<LaneSign>,
}

impl LaneLayout {
    pub fn pack3(weight_sign: LaneSign) -> Self {
        LaneLayout {
            lane_width_bits: 11,
            offsets: vec![0, 11, 22],
            signedness: vec![weight_sign; 3],
        }
    }

    pub fn pack4(weight_sign: LaneSign) -> Self {
        LaneLayout {
            lane_width_bits: 11,
            offsets: vec![0, 11, 22, 33],
            signedness: vec![weight_sign; 4],
        }
    }

    /// High/low nibble pair of one 8-bit weight in a single DSP: lane 0 holds
    /// the signed high nibble, lane 1 the unsigned low nibble.
    pub fn w8_pair() -> Self {
        LaneLayout {
            lane_width_bits: 11,
            offsets: vec![0, 11],
            signedness: vec![LaneSign::Signed, LaneSign::Unsigned],
        }
    }

    /// Deliberately broken spacing (9 bits cannot hold a 10-bit product).
    /// Test hook for the pack-verify failure path; skips validation.
    pub fn corrupted() -> Self {
        LaneLayout {
            lane_width_bits: 9,
            offsets: vec![0, 9, 18],
            signedness: vec![LaneSign::Signed; 3],
        }
    }

    pub fn lanes(&self) -> usize {
        self.offsets.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() || self.offsets.len() != self.signedness.len() {
            return Err(Error::InvalidConfig(
                "lane layout needs matching offsets and signedness".into(),
            ));
        }
        // A 4-bit x 6-bit product needs 10 bits; 11 leaves one guard bit.
        if self.lane_width_bits < 11 {
            return Err(Error::InvalidConfig(format!(
                "lane width {} leaves no guard bit",
                self.lane_width_bits
            )));
        }
        for w in self.offsets.windows(2) {
            if w[1] < w[0] + self.lane_width_bits {
                return Err(Error::InvalidConfig("overlapping lanes".into()));
            }
        }
        let top = *self.offsets.last().unwrap();
        if top + self.lane_width_bits > P_BITS {
            return Err(Error::InvalidConfig("lanes exceed the 45-bit product".into()));
        }
        Ok(())
    }
}

fn check_lane_value(v: i64, sign: LaneSign) -> Result<i64> {
    match sign {
        LaneSign::Signed => check_range("signed 4-bit lane", v, 4),
        LaneSign::Unsigned => {
            if !(0..=15).contains(&v) {
                return Err(Error::OutOfRange {
                    what: "unsigned 4-bit lane",
                    value: v,
                    lo: 0,
                    hi: 15,
                });
            }
            Ok(v)
        }
    }
}

/// Combines per-lane values into one port word: sum of value << offset.
/// For unsigned lanes this equals a plain bitwise OR of the shifted fields;
/// signed lanes may borrow into their upper neighbour.
fn pack_lanes(values: &[i64], layout: &LaneLayout) -> Result<i64> {
    let mut word = 0i64;
    for (k, &v) in values.iter().enumerate() {
        check_lane_value(v, layout.signedness[k])?;
        word += v << layout.offsets[k];
    }
    Ok(word)
}

/// Splits a product register into per-lane values, repaying sign borrows
/// from least to most significant lane. Lane k spans bits
/// [offset_k, offset_{k+1}); the top lane takes everything that remains.
fn extract_lanes(p: i64, layout: &LaneLayout) -> Vec<i64> {
    let n = layout.lanes();
    let mut out = Vec::with_capacity(n);
    let mut rest = p >> layout.offsets[0];
    for k in 0..n {
        if k + 1 < n {
            let width = layout.offsets[k + 1] - layout.offsets[k];
            let m = rest.rem_euclid(1i64 << width);
            let digit = if m >= (1i64 << (width - 1)) {
                m - (1i64 << width)
            } else {
                m
            };
            out.push(digit);
            // Subtracting the signed digit repays its borrow before the next
            // lane is interpreted.
            rest = (rest - digit) >> width;
        } else {
            out.push(rest);
        }
    }
    out
}

fn check_act(a: i64) -> Result<i64> {
    if !(ACT_MIN..=ACT_MAX).contains(&a) {
        return Err(Error::OutOfRange {
            what: "signed 6-bit activation",
            value: a,
            lo: ACT_MIN,
            hi: ACT_MAX,
        });
    }
    Ok(a)
}

/// Three weights sharing one activation: weights in port D at the layout
/// offsets, the sign-extended activation in port B, port A zeroed.
pub fn pack3_with_layout(
    weights: [i8; 3],
    activation: i8,
    layout: &LaneLayout,
) -> Result<DspOperands> {
    let vals = [weights[0] as i64, weights[1] as i64, weights[2] as i64];
    let d = pack_lanes(&vals, layout)?;
    let b = check_act(activation as i64)?;
    DspOperands::new(0, d, b)
}

pub fn pack3(weights: [i8; 3], activation: i8, weight_sign: LaneSign) -> Result<DspOperands> {
    pack3_with_layout(weights, activation, &LaneLayout::pack3(weight_sign))
}

/// Recovers the three products w_k * a from a factor-3 packed multiply.
pub fn unpack3_with_layout(p: DspProduct, layout: &LaneLayout) -> [i64; 3] {
    let lanes = extract_lanes(p.value(), layout);
    [lanes[0], lanes[1], lanes[2]]
}

pub fn unpack3(p: DspProduct, weight_sign: LaneSign) -> [i64; 3] {
    unpack3_with_layout(p, &LaneLayout::pack3(weight_sign))
}

/// Two weights sharing two activations: weights in port D at offsets
/// {0, 22}, activations in port B at offsets {0, 11}, so the four cross
/// products land at {0, 11, 22, 33}.
pub fn pack4(weights: [i8; 2], activations: [i8; 2], weight_sign: LaneSign) -> Result<DspOperands> {
    for &w in &weights {
        check_lane_value(w as i64, weight_sign)?;
    }
    let d = (weights[0] as i64) + ((weights[1] as i64) << 22);
    let b = check_act(activations[0] as i64)? + (check_act(activations[1] as i64)? << 11);
    DspOperands::new(0, d, b)
}

/// Recovers the four cross products as `out[i][j] = a_i * w_j`.
pub fn unpack4_with_layout(p: DspProduct, layout: &LaneLayout) -> [[i64; 2]; 2] {
    let lanes = extract_lanes(p.value(), layout);
    // Lane order by offset: a0*w0, a1*w0, a0*w1, a1*w1.
    [[lanes[0], lanes[2]], [lanes[1], lanes[3]]]
}

pub fn unpack4(p: DspProduct, weight_sign: LaneSign) -> [[i64; 2]; 2] {
    unpack4_with_layout(p, &LaneLayout::pack4(weight_sign))
}

/// Which packing scheme carries the multiplications.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PackFactor {
    Three,
    Four,
}

/// Multiplies one 6-bit activation by one 8-bit weight through the 4-bit
/// datapath: the signed high nibble and unsigned low nibble each occupy a
/// lane of a single DSP, and the result recombines as high*16 + low.
fn w8_mul_via_lanes(act: i8, w: i8) -> Result<i64> {
    let nib = decompose_w8(w);
    let layout = LaneLayout::w8_pair();
    let d = pack_lanes(&[nib.high as i64, nib.low as i64], &layout)?;
    let ops = DspOperands::new(0, d, check_act(act as i64)?)?;
    let lanes = extract_lanes(dsp48_mac(ops).value(), &layout);
    Ok(lanes[0] * 16 + lanes[1])
}

/// Integer dot product of 6-bit activations with 8-bit weights, computed
/// entirely through packed 4-bit lanes. Equals the direct dot product.
pub fn packed_dot_w8(act: &[i8], wgt: &[i8], factor: PackFactor) -> Result<i64> {
    if act.len() != wgt.len() {
        return Err(Error::ShapeMismatch(format!(
            "activation length {} vs weight length {}",
            act.len(),
            wgt.len()
        )));
    }
    let mut acc = 0i64;
    match factor {
        PackFactor::Three => {
            for (&a, &w) in act.iter().zip(wgt.iter()) {
                acc += w8_mul_via_lanes(a, w)?;
            }
        }
        PackFactor::Four => {
            // Pairs of elements share one DSP per nibble plane; the dot
            // product consumes the diagonal lanes.
            let mut i = 0;
            while i < act.len() {
                let a0 = act[i];
                let a1 = if i + 1 < act.len() { act[i + 1] } else { 0 };
                let n0 = decompose_w8(wgt[i]);
                let n1 = if i + 1 < wgt.len() {
                    decompose_w8(wgt[i + 1])
                } else {
                    decompose_w8(0)
                };
                let hi = unpack4(
                    dsp48_mac(pack4([n0.high, n1.high], [a0, a1], LaneSign::Signed)?),
                    LaneSign::Signed,
                );
                let lo = unpack4(
                    dsp48_mac(pack4(
                        [n0.low as i8, n1.low as i8],
                        [a0, a1],
                        LaneSign::Unsigned,
                    )?),
                    LaneSign::Unsigned,
                );
                acc += hi[0][0] * 16 + lo[0][0];
                acc += hi[1][1] * 16 + lo[1][1];
                i += 2;
            }
        }
    }
    Ok(acc)
}

fn gemm_w4_rows_pack3(
    q: &QuantizedMatrix,
    rows: &[usize],
    act: &Array2<i32>,
    out: &mut Array2<i64>,
) -> Result<()> {
    for chunk in rows.chunks(3) {
        for j in 0..q.cols() {
            let w = |k: usize| -> i8 {
                if k < chunk.len() {
                    q.codes[(chunk[k], j)]
                } else {
                    0
                }
            };
            for f in 0..act.ncols() {
                let a = act[(j, f)] as i8;
                let prods = unpack3(
                    dsp48_mac(pack3([w(0), w(1), w(2)], a, LaneSign::Signed)?),
                    LaneSign::Signed,
                );
                for (k, &r) in chunk.iter().enumerate() {
                    out[(r, f)] += prods[k];
                }
            }
        }
    }
    Ok(())
}

fn gemm_w4_rows_pack4(
    q: &QuantizedMatrix,
    rows: &[usize],
    act: &Array2<i32>,
    out: &mut Array2<i64>,
) -> Result<()> {
    for chunk in rows.chunks(2) {
        for j in 0..q.cols() {
            let w0 = q.codes[(chunk[0], j)];
            let w1 = if chunk.len() > 1 {
                q.codes[(chunk[1], j)]
            } else {
                0
            };
            let mut f = 0;
            while f < act.ncols() {
                let a0 = act[(j, f)] as i8;
                let a1 = if f + 1 < act.ncols() {
                    act[(j, f + 1)] as i8
                } else {
                    0
                };
                let prods = unpack4(
                    dsp48_mac(pack4([w0, w1], [a0, a1], LaneSign::Signed)?),
                    LaneSign::Signed,
                );
                for (k, &r) in chunk.iter().enumerate() {
                    out[(r, f)] += prods[0][k];
                    if f + 1 < act.ncols() {
                        out[(r, f + 1)] += prods[1][k];
                    }
                }
                f += 2;
            }
        }
    }
    Ok(())
}

/// 8-bit rows ride the 4-bit machinery with two DSPs per pack: one carries
/// the signed high nibbles, its twin the unsigned low nibbles, and each
/// product recombines as high*16 + low.
fn gemm_w8_rows_pack3(
    q: &QuantizedMatrix,
    rows: &[usize],
    act: &Array2<i32>,
    out: &mut Array2<i64>,
) -> Result<()> {
    for chunk in rows.chunks(3) {
        for j in 0..q.cols() {
            let nib = |k: usize| {
                if k < chunk.len() {
                    decompose_w8(q.codes[(chunk[k], j)])
                } else {
                    decompose_w8(0)
                }
            };
            let (n0, n1, n2) = (nib(0), nib(1), nib(2));
            for f in 0..act.ncols() {
                let a = act[(j, f)] as i8;
                let hi = unpack3(
                    dsp48_mac(pack3([n0.high, n1.high, n2.high], a, LaneSign::Signed)?),
                    LaneSign::Signed,
                );
                let lo = unpack3(
                    dsp48_mac(pack3(
                        [n0.low as i8, n1.low as i8, n2.low as i8],
                        a,
                        LaneSign::Unsigned,
                    )?),
                    LaneSign::Unsigned,
                );
                for (k, &r) in chunk.iter().enumerate() {
                    out[(r, f)] += hi[k] * 16 + lo[k];
                }
            }
        }
    }
    Ok(())
}

fn gemm_w8_rows_pack4(
    q: &QuantizedMatrix,
    rows: &[usize],
    act: &Array2<i32>,
    out: &mut Array2<i64>,
) -> Result<()> {
    for chunk in rows.chunks(2) {
        for j in 0..q.cols() {
            let n0 = decompose_w8(q.codes[(chunk[0], j)]);
            let n1 = if chunk.len() > 1 {
                decompose_w8(q.codes[(chunk[1], j)])
            } else {
                decompose_w8(0)
            };
            let mut f = 0;
            while f < act.ncols() {
                let a0 = act[(j, f)] as i8;
                let a1 = if f + 1 < act.ncols() {
                    act[(j, f + 1)] as i8
                } else {
                    0
                };
                let hi = unpack4(
                    dsp48_mac(pack4([n0.high, n1.high], [a0, a1], LaneSign::Signed)?),
                    LaneSign::Signed,
                );
                let lo = unpack4(
                    dsp48_mac(pack4(
                        [n0.low as i8, n1.low as i8],
                        [a0, a1],
                        LaneSign::Unsigned,
                    )?),
                    LaneSign::Unsigned,
                );
                for (k, &r) in chunk.iter().enumerate() {
                    out[(r, f)] += hi[0][k] * 16 + lo[0][k];
                    if f + 1 < act.ncols() {
                        out[(r, f + 1)] += hi[1][k] * 16 + lo[1][k];
                    }
                }
                f += 2;
            }
        }
    }
    Ok(())
}

/// Integer GEMM `out[i][f] = sum_j codes[i][j] * act[j][f]`, computed lane by
/// lane: 4-bit rows go through pack3/pack4 directly, 8-bit rows through the
/// nibble-decomposed path. Bit-exact equal to a direct integer GEMM.
pub fn packed_gemm(
    q: &QuantizedMatrix,
    act_codes: &Array2<i32>,
    factor: PackFactor,
) -> Result<Array2<i64>> {
    if q.cols() != act_codes.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "weights {}x{} vs activations {}x{}",
            q.rows(),
            q.cols(),
            act_codes.nrows(),
            act_codes.ncols()
        )));
    }
    for &a in act_codes.iter() {
        check_act(a as i64)?;
    }
    let mut out = Array2::<i64>::zeros((q.rows(), act_codes.ncols()));
    let w4_rows: Vec<usize> = (0..q.rows())
        .filter(|&i| q.row_tags[i] == PrecisionTag::W4)
        .collect();
    let w8_rows: Vec<usize> = (0..q.rows())
        .filter(|&i| q.row_tags[i] == PrecisionTag::W8)
        .collect();
    match factor {
        PackFactor::Three => {
            gemm_w4_rows_pack3(q, &w4_rows, act_codes, &mut out)?;
            gemm_w8_rows_pack3(q, &w8_rows, act_codes, &mut out)?;
        }
        PackFactor::Four => {
            gemm_w4_rows_pack4(q, &w4_rows, act_codes, &mut out)?;
            gemm_w8_rows_pack4(q, &w8_rows, act_codes, &mut out)?;
        }
    }
    Ok(out)
}

/// Outcome of an exhaustive packing sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub cases: u64,
    pub failures: u64,
    pub first_failure: Option<String>,
}

impl SweepReport {
    fn merge(mut self, other: SweepReport) -> SweepReport {
        self.cases += other.cases;
        self.failures += other.failures;
        if self.first_failure.is_none() {
            self.first_failure = other.first_failure;
        }
        self
    }
}

fn parallel_sweep<F>(range: Vec<i8>, jobs: usize, per_value: F) -> SweepReport
where
    F: Fn(i8) -> SweepReport + Sync,
{
    let jobs = jobs.max(1);
    if jobs == 1 || range.len() < 2 {
        return range
            .into_iter()
            .map(per_value)
            .fold(SweepReport::default(), SweepReport::merge);
    }
    let chunk = range.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = range
            .chunks(chunk)
            .map(|c| {
                let per_value = &per_value;
                scope.spawn(move || {
                    c.iter()
                        .map(|&v| per_value(v))
                        .fold(SweepReport::default(), SweepReport::merge)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .fold(SweepReport::default(), SweepReport::merge)
    })
}

/// All (w0, w1, w2, a) in [-8,7]^3 x [-32,31]: 262,144 cases.
pub fn sweep_pack3(layout: &LaneLayout, jobs: usize) -> SweepReport {
    parallel_sweep((-32..=31).collect(), jobs, |a| {
        let mut rep = SweepReport::default();
        for w0 in -8i8..=7 {
            for w1 in -8i8..=7 {
                for w2 in -8i8..=7 {
                    rep.cases += 1;
                    let ok = pack3_with_layout([w0, w1, w2], a, layout)
                        .map(|ops| unpack3_with_layout(dsp48_mac(ops), layout))
                        .map(|got| {
                            got == [
                                w0 as i64 * a as i64,
                                w1 as i64 * a as i64,
                                w2 as i64 * a as i64,
                            ]
                        })
                        .unwrap_or(false);
                    if !ok {
                        rep.failures += 1;
                        rep.first_failure
                            .get_or_insert_with(|| format!("pack3 w=[{w0},{w1},{w2}] a={a}"));
                    }
                }
            }
        }
        rep
    })
}

/// All (w0, w1, a0, a1) in [-8,7]^2 x [-32,31]^2: 1,048,576 cases.
pub fn sweep_pack4(layout: &LaneLayout, jobs: usize) -> SweepReport {
    parallel_sweep((-32..=31).collect(), jobs, |a0| {
        let mut rep = SweepReport::default();
        for a1 in -32i8..=31 {
            for w0 in -8i8..=7 {
                for w1 in -8i8..=7 {
                    rep.cases += 1;
                    let ok = pack4([w0, w1], [a0, a1], LaneSign::Signed)
                        .map(|ops| unpack4_with_layout(dsp48_mac(ops), layout))
                        .map(|got| {
                            got == [
                                [a0 as i64 * w0 as i64, a0 as i64 * w1 as i64],
                                [a1 as i64 * w0 as i64, a1 as i64 * w1 as i64],
                            ]
                        })
                        .unwrap_or(false);
                    if !ok {
                        rep.failures += 1;
                        rep.first_failure
                            .get_or_insert_with(|| format!("pack4 w=[{w0},{w1}] a=[{a0},{a1}]"));
                    }
                }
            }
        }
        rep
    })
}

/// All (w8, a6) in [-128,127] x [-32,31]: 16,384 nibble-recombination cases.
pub fn sweep_w8(jobs: usize) -> SweepReport {
    parallel_sweep((-32..=31).collect(), jobs, |a| {
        let mut rep = SweepReport::default();
        for w in i8::MIN..=i8::MAX {
            rep.cases += 1;
            let ok = packed_dot_w8(&[a], &[w], PackFactor::Three)
                .map(|got| got == a as i64 * w as i64)
                .unwrap_or(false);
            if !ok {
                rep.failures += 1;
                rep.first_failure
                    .get_or_insert_with(|| format!("w8 w={w} a={a}"));
            }
        }
        rep
    })
}
