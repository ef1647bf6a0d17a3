//! Row-wise mixed-precision quantization.
//!
//! Weights are quantized per row with a symmetric linear quantizer: each row
//! carries its own bit-width tag (4- or 8-bit) and a real-valued scale. 8-bit
//! codes can be decomposed into a signed high nibble and an unsigned low
//! nibble so that all integer arithmetic runs on 4-bit atoms. Model-size and
//! bit-operation accounting for mixed-ratio models lives here too.

use ndarray::{Array2, ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-row weight precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionTag {
    W4,
    W8,
}

impl PrecisionTag {
    pub fn bits(self) -> u32 {
        match self {
            PrecisionTag::W4 => 4,
            PrecisionTag::W8 => 8,
        }
    }

    /// Smallest representable code, -2^(b-1).
    pub fn code_min(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    /// Largest representable code, 2^(b-1)-1.
    pub fn code_max(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }
}

/// Quantizer settings. Weights are always symmetric 4/8-bit; the activation
/// bit-width is configurable (6 by default, 8 for the all-8-bit ablation).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantParams {
    pub weight_bits_low: u32,
    pub weight_bits_high: u32,
    pub act_bits: u32,
    pub symmetric: bool,
}

impl Default for QuantParams {
    fn default() -> Self {
        QuantParams {
            weight_bits_low: 4,
            weight_bits_high: 8,
            act_bits: 6,
            symmetric: true,
        }
    }
}

impl QuantParams {
    pub fn with_act_bits(act_bits: u32) -> Result<Self> {
        let p = QuantParams {
            act_bits,
            ..QuantParams::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_bits_low >= self.weight_bits_high {
            return Err(Error::InvalidConfig(
                "weight_bits_low must be below weight_bits_high".into(),
            ));
        }
        if !(2..=16).contains(&self.act_bits) {
            return Err(Error::InvalidConfig(format!(
                "act_bits must be in [2, 16], got {}",
                self.act_bits
            )));
        }
        if !self.symmetric {
            return Err(Error::InvalidConfig(
                "only symmetric quantization is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Integer weight codes with per-row precision tags and per-row scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub codes: Array2<i8>,
    pub row_tags: Vec<PrecisionTag>,
    pub row_scales: Vec<f64>,
    pub act_scale_hint: Option<f64>,
}

impl QuantizedMatrix {
    pub fn rows(&self) -> usize {
        self.codes.nrows()
    }

    pub fn cols(&self) -> usize {
        self.codes.ncols()
    }

    /// Fraction of rows tagged 8-bit.
    pub fn mixed_ratio(&self) -> f64 {
        let w8 = self
            .row_tags
            .iter()
            .filter(|t| **t == PrecisionTag::W8)
            .count();
        w8 as f64 / self.rows() as f64
    }

    /// Checks the structural invariants: one tag and one positive scale per
    /// row, and every code inside its row's representable range.
    pub fn validate(&self) -> Result<()> {
        if self.codes.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        if self.row_tags.len() != self.rows() || self.row_scales.len() != self.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} tags / {} scales for {} rows",
                self.row_tags.len(),
                self.row_scales.len(),
                self.rows()
            )));
        }
        for (i, row) in self.codes.rows().into_iter().enumerate() {
            if self.row_scales[i].partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::InvalidConfig(format!(
                    "row {i} scale {} is not positive",
                    self.row_scales[i]
                )));
            }
            let tag = self.row_tags[i];
            for &c in row.iter() {
                let c = c as i32;
                if c < tag.code_min() || c > tag.code_max() {
                    return Err(Error::OutOfRange {
                        what: "weight code",
                        value: c as i64,
                        lo: tag.code_min() as i64,
                        hi: tag.code_max() as i64,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Rounds half away from zero (f64::round semantics, named for clarity).
#[inline]
fn round_half_away(x: f64) -> f64 {
    x.round()
}

fn row_scale(row: &[f64], tag: PrecisionTag) -> f64 {
    let max_abs = row.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / tag.code_max() as f64
    }
}

/// Quantizes each row of `weights` to the bit-width given by its tag.
///
/// Per row i with bit-width b: scale = max|w_i| / (2^(b-1)-1) (1.0 for an
/// all-zero row); codes = clamp(round(w/scale), -2^(b-1), 2^(b-1)-1) with
/// rounding half away from zero.
pub fn quantize_rows(
    weights: &Array2<f64>,
    tags: &[PrecisionTag],
    params: &QuantParams,
) -> Result<QuantizedMatrix> {
    params.validate()?;
    if weights.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if tags.len() != weights.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} tags for {} rows",
            tags.len(),
            weights.nrows()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidWeight);
    }

    let mut codes = Array2::<i8>::zeros(weights.raw_dim());
    let mut scales = Vec::with_capacity(weights.nrows());
    for (i, row) in weights.rows().into_iter().enumerate() {
        let tag = tags[i];
        let row_slice = row.as_slice().expect("row-major weights");
        let s = row_scale(row_slice, tag);
        scales.push(s);
        for (j, &w) in row_slice.iter().enumerate() {
            let q = round_half_away(w / s)
                .max(tag.code_min() as f64)
                .min(tag.code_max() as f64);
            codes[(i, j)] = q as i8;
        }
    }
    Ok(QuantizedMatrix {
        codes,
        row_tags: tags.to_vec(),
        row_scales: scales,
        act_scale_hint: None,
    })
}

/// Inverse of [`quantize_rows`]: `out[i][j] = codes[i][j] * row_scales[i]`.
pub fn dequantize(q: &QuantizedMatrix) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(q.codes.raw_dim());
    for (i, row) in q.codes.rows().into_iter().enumerate() {
        let s = q.row_scales[i];
        for (j, &c) in row.iter().enumerate() {
            out[(i, j)] = c as f64 * s;
        }
    }
    out
}

/// Quantize-dequantize pass with a straight-through gradient mask.
///
/// Returns the dequantized weights plus a mask that is 1 where |w| lies
/// within the row's clamp bound and 0 outside; the backward pass multiplies
/// the upstream gradient by this mask (clipped straight-through estimator).
/// With scales derived from the rows themselves the bound equals the row
/// maximum, so the mask is all-ones; out-of-clamp masking occurs when scales
/// are supplied externally (see [`fake_quantize_with_scales`]).
pub fn fake_quantize(
    weights: &Array2<f64>,
    tags: &[PrecisionTag],
    params: &QuantParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let q = quantize_rows(weights, tags, params)?;
    let deq = dequantize(&q);
    let mut mask = Array2::<f64>::zeros(weights.raw_dim());
    for (i, row) in weights.rows().into_iter().enumerate() {
        // The clamp bound scale*(2^(b-1)-1) is mathematically the row max;
        // using the max directly avoids a 1-ulp false negative on the row's
        // largest element.
        let bound = row.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
        let bound = if bound == 0.0 { 1.0 } else { bound };
        for (j, &w) in row.iter().enumerate() {
            mask[(i, j)] = if w.abs() <= bound { 1.0 } else { 0.0 };
        }
    }
    Ok((deq, mask))
}

/// [`fake_quantize`] with externally fixed row scales. Values whose magnitude
/// exceeds scale*(2^(b-1)-1) saturate and receive a zero gradient mask.
pub fn fake_quantize_with_scales(
    weights: &Array2<f64>,
    tags: &[PrecisionTag],
    scales: &[f64],
) -> Result<(Array2<f64>, Array2<f64>)> {
    if weights.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    if tags.len() != weights.nrows() || scales.len() != weights.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} tags / {} scales for {} rows",
            tags.len(),
            scales.len(),
            weights.nrows()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidWeight);
    }
    let mut deq = Array2::<f64>::zeros(weights.raw_dim());
    let mut mask = Array2::<f64>::zeros(weights.raw_dim());
    for (i, row) in weights.rows().into_iter().enumerate() {
        let tag = tags[i];
        let s = scales[i];
        let bound = s * tag.code_max() as f64;
        for (j, &w) in row.iter().enumerate() {
            let q = round_half_away(w / s)
                .max(tag.code_min() as f64)
                .min(tag.code_max() as f64);
            deq[(i, j)] = q * s;
            mask[(i, j)] = if w.abs() <= bound { 1.0 } else { 0.0 };
        }
    }
    Ok((deq, mask))
}

/// Per-tensor symmetric activation quantization with a dynamically computed
/// scale: scale = max|x| / (2^(b-1)-1), 1.0 for an all-zero tensor.
pub fn quantize_activations(x: ArrayViewD<'_, f64>, act_bits: u32) -> Result<(ArrayD<i32>, f64)> {
    if !(2..=16).contains(&act_bits) {
        return Err(Error::InvalidConfig(format!(
            "act_bits must be in [2, 16], got {act_bits}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidWeight);
    }
    let qmax = ((1i32 << (act_bits - 1)) - 1) as f64;
    let qmin = -(1i32 << (act_bits - 1)) as f64;
    let max_abs = x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / qmax };
    let codes = x.mapv(|v| round_half_away(v / scale).max(qmin).min(qmax) as i32);
    Ok((codes, scale))
}

/// Signed high nibble plus unsigned low nibble of an 8-bit weight code,
/// reconstructing as high*16 + low.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NibblePair {
    /// Signed, in [-8, 7]; carries the sign of the original value.
    pub high: i8,
    /// Unsigned, in [0, 15].
    pub low: u8,
}

impl NibblePair {
    pub fn recombine(self) -> i8 {
        (self.high as i16 * 16 + self.low as i16) as i8
    }
}

/// Splits an 8-bit weight code: high = arithmetic shift right by 4 (keeps the
/// sign), low = w & 0xF taken unsigned.
pub fn decompose_w8(w: i8) -> NibblePair {
    NibblePair {
        high: w >> 4,
        low: (w & 0xF) as u8,
    }
}

/// Weight storage in bytes for `param_count` parameters at the given 8-bit
/// mixed ratio: params * (ratio*8 + (1-ratio)*4) / 8. Quantization scales are
/// excluded and reported separately as overhead.
pub fn model_size_bytes(param_count: u64, mixed_ratio_8bit: f64) -> f64 {
    let avg_bits = mixed_ratio_8bit * 8.0 + (1.0 - mixed_ratio_8bit) * 4.0;
    param_count as f64 * avg_bits / 8.0
}

/// Decimal megabytes (1e6 bytes).
pub fn model_size_mb(param_count: u64, mixed_ratio_8bit: f64) -> f64 {
    model_size_bytes(param_count, mixed_ratio_8bit) / 1e6
}

/// Bit operations: MACs weighted by average weight bits and activation bits.
pub fn bops(macs: u64, mixed_ratio_8bit: f64, act_bits: u32) -> f64 {
    let avg_bits = mixed_ratio_8bit * 8.0 + (1.0 - mixed_ratio_8bit) * 4.0;
    macs as f64 * avg_bits * act_bits as f64
}
