//! Deterministic synthetic token-sequence dataset: a few Gaussian class
//! prototypes with additive noise, balanced classes, and a fixed 80/20
//! train/validation split.

use std::path::Path;

use ndarray::{Array3, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qvt::{read_qvt, write_qvt, QvtTensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            num_samples: 400,
            tokens: 8,
            token_dim: 16,
            num_classes: 4,
            noise_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    /// (classes, tokens, token_dim)
    pub prototypes: Array3<f64>,
    /// (samples, tokens, token_dim), class-major order.
    pub inputs: Array3<f64>,
    pub labels: Vec<usize>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

impl SyntheticDataset {
    /// Generates the dataset from the seed. Prototypes are scaled so that
    /// the minimum pairwise distance is at least four noise sigmas; samples
    /// per class are equal and each class splits 80/20 in order.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        if config.num_classes < 2 || config.num_samples < config.num_classes {
            return Err(Error::InvalidConfig("dataset too small".into()));
        }
        if config.num_classes > 127 {
            return Err(Error::InvalidConfig(
                "labels are stored as i8; at most 127 classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.num_classes;
        let per_class = config.num_samples / c;
        let n = per_class * c;

        let mut prototypes =
            Array3::from_shape_fn((c, config.tokens, config.token_dim), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
        let mut min_dist = f64::INFINITY;
        for a in 0..c {
            for b in (a + 1)..c {
                let d2: f64 = prototypes
                    .index_axis(ndarray::Axis(0), a)
                    .iter()
                    .zip(prototypes.index_axis(ndarray::Axis(0), b).iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                min_dist = min_dist.min(d2.sqrt());
            }
        }
        let needed = 4.0 * config.noise_sigma;
        if min_dist < needed {
            let scale = needed / min_dist;
            prototypes.mapv_inplace(|v| v * scale);
        }

        let mut inputs = Array3::zeros((n, config.tokens, config.token_dim));
        let mut labels = Vec::with_capacity(n);
        for class in 0..c {
            for k in 0..per_class {
                let i = class * per_class + k;
                for t in 0..config.tokens {
                    for d in 0..config.token_dim {
                        inputs[(i, t, d)] = prototypes[(class, t, d)]
                            + config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                labels.push(class);
            }
        }

        let train_per_class = (per_class * 4) / 5;
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        for class in 0..c {
            for k in 0..per_class {
                let i = class * per_class + k;
                if k < train_per_class {
                    train_idx.push(i);
                } else {
                    val_idx.push(i);
                }
            }
        }

        Ok(SyntheticDataset {
            config: config.clone(),
            prototypes,
            inputs,
            labels,
            train_idx,
            val_idx,
        })
    }

    /// Builds a dataset from explicit tensors; used for hand-constructed
    /// fixtures. Assumes class-major sample order and computes the same
    /// per-class 80/20 split as [`SyntheticDataset::generate`].
    pub fn from_parts(
        config: DatasetConfig,
        prototypes: Array3<f64>,
        inputs: Array3<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let c = config.num_classes;
        let per_class = labels.len() / c;
        let train_per_class = (per_class * 4) / 5;
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        for class in 0..c {
            for k in 0..per_class {
                let i = class * per_class + k;
                if labels[i] != class {
                    return Err(Error::InvalidConfig("labels must be class-major".into()));
                }
                if k < train_per_class {
                    train_idx.push(i);
                } else {
                    val_idx.push(i);
                }
            }
        }
        Ok(SyntheticDataset {
            config,
            prototypes,
            inputs,
            labels,
            train_idx,
            val_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_idx,
            Split::Val => &self.val_idx,
        }
    }

    /// Copies the chosen samples into a batch tensor plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Array3<f64>, Vec<usize>) {
        let (f, d) = (self.config.tokens, self.config.token_dim);
        let mut x = Array3::zeros((idx.len(), f, d));
        let mut y = Vec::with_capacity(idx.len());
        for (bi, &i) in idx.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&self.inputs.index_axis(ndarray::Axis(0), i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn sample(&self, i: usize) -> ArrayView2<'_, f64> {
        self.inputs.index_axis(ndarray::Axis(0), i)
    }

    /// Writes inputs and labels as QVT tensors next to a small JSON config.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_qvt(&dir.join("inputs.qvt"), &QvtTensor::from_f64(&self.inputs))?;
        let labels = QvtTensor::I8 {
            dims: vec![self.labels.len()],
            data: self.labels.iter().map(|&l| l as i8).collect(),
            tags: None,
            scales: None,
        };
        write_qvt(&dir.join("labels.qvt"), &labels)?;
        let cfg = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(dir.join("dataset.json"), cfg)?;
        Ok(())
    }

    /// Regenerates from the stored config and checks the tensors match.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.json");
        let text = crate::error::read_file(&cfg_path)?;
        let config: DatasetConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(cfg_path.display().to_string(), e))?;
        let ds = SyntheticDataset::generate(&config)?;
        let stored = read_qvt(&dir.join("inputs.qvt"))?.to_f64()?;
        if stored.shape() != ds.inputs.shape() {
            return Err(Error::ShapeMismatch(
                "stored dataset does not match its config".into(),
            ));
        }
        Ok(ds)
    }
}
