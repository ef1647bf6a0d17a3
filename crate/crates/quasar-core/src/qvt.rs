//! QVT tensor files: one UTF-8 JSON header line followed by the raw
//! little-endian payload in row-major order. f32 tensors carry no extras;
//! i8 tensors may carry per-row precision tags and scales.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{PrecisionTag, QuantizedMatrix};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QvtHeader {
    pub dims: Vec<usize>,
    pub dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<PrecisionTag>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QvtTensor {
    F32 {
        dims: Vec<usize>,
        data: Vec<f32>,
    },
    I8 {
        dims: Vec<usize>,
        data: Vec<i8>,
        tags: Option<Vec<PrecisionTag>>,
        scales: Option<Vec<f64>>,
    },
}

impl QvtTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            QvtTensor::F32 { dims, .. } | QvtTensor::I8 { dims, .. } => dims,
        }
    }

    pub fn from_f64<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        QvtTensor::F32 {
            dims: a.shape().to_vec(),
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_quantized(q: &QuantizedMatrix) -> Self {
        QvtTensor::I8 {
            dims: vec![q.rows(), q.cols()],
            data: q.codes.iter().copied().collect(),
            tags: Some(q.row_tags.clone()),
            scales: Some(q.row_scales.clone()),
        }
    }

    pub fn to_f64(&self) -> Result<ArrayD<f64>> {
        match self {
            QvtTensor::F32 { dims, data } => {
                ArrayD::from_shape_vec(IxDyn(dims), data.iter().map(|&v| v as f64).collect())
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))
            }
            QvtTensor::I8 { .. } => Err(Error::InvalidConfig(
                "expected an f32 tensor, found i8 codes".into(),
            )),
        }
    }

    pub fn to_quantized(&self) -> Result<QuantizedMatrix> {
        match self {
            QvtTensor::I8 {
                dims,
                data,
                tags: Some(tags),
                scales: Some(scales),
            } if dims.len() == 2 => {
                let codes = ndarray::Array2::from_shape_vec((dims[0], dims[1]), data.clone())
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                let q = QuantizedMatrix {
                    codes,
                    row_tags: tags.clone(),
                    row_scales: scales.clone(),
                    act_scale_hint: None,
                };
                q.validate()?;
                Ok(q)
            }
            _ => Err(Error::InvalidConfig(
                "expected a 2-D i8 tensor with tags and scales".into(),
            )),
        }
    }
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub fn write_qvt(path: &Path, tensor: &QvtTensor) -> Result<()> {
    let (header, payload): (QvtHeader, Vec<u8>) = match tensor {
        QvtTensor::F32 { dims, data } => (
            QvtHeader {
                dims: dims.clone(),
                dtype: "f32".into(),
                tags: None,
                scales: None,
            },
            data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        QvtTensor::I8 {
            dims,
            data,
            tags,
            scales,
        } => (
            QvtHeader {
                dims: dims.clone(),
                dtype: "i8".into(),
                tags: tags.clone(),
                scales: scales.clone(),
            },
            data.iter().map(|&v| v as u8).collect(),
        ),
    };
    if numel(tensor.dims())
        != match tensor {
            QvtTensor::F32 { data, .. } => data.len(),
            QvtTensor::I8 { data, .. } => data.len(),
        }
    {
        return Err(Error::ShapeMismatch("payload does not match dims".into()));
    }
    let mut out = serde_json::to_string(&header).expect("header serializes").into_bytes();
    out.push(b'\n');
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_qvt(path: &Path) -> Result<QvtTensor> {
    let bytes = crate::error::read_bytes(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: "missing header line".into(),
        })?;
    let header: QvtHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let payload = &bytes[nl + 1..];
    let n = numel(&header.dims);
    match header.dtype.as_str() {
        "f32" => {
            if payload.len() != 4 * n {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    detail: format!("expected {} payload bytes, found {}", 4 * n, payload.len()),
                });
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(QvtTensor::F32 {
                dims: header.dims,
                data,
            })
        }
        "i8" => {
            if payload.len() != n {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    detail: format!("expected {} payload bytes, found {}", n, payload.len()),
                });
            }
            Ok(QvtTensor::I8 {
                dims: header.dims,
                data: payload.iter().map(|&b| b as i8).collect(),
                tags: header.tags,
                scales: header.scales,
            })
        }
        other => Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("unknown dtype {other:?}"),
        }),
    }
}
