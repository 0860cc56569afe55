//! Post-training compression: magnitude pruning into COO sparse tensors,
//! binary16 storage, sparsity reports and the `.gkdm` model file.

mod format;

use std::collections::BTreeMap;

use half::f16;
use indexmap::IndexMap;
use serde::Serialize;

use crate::models::{ArchSpec, ModelParams};
use crate::{Error, Result, Tensor};

pub use format::{deserialize, load_model, save_model, serialize, tensor_payload_bytes};

/// Default pruning threshold exponent: weights below `2^-100` are dropped.
pub const DEFAULT_PRUNE_EXP: i32 = -100;
/// Dropped fraction at or above which a pruned tensor is stored sparse.
pub const SPARSE_BREAK_EVEN: f64 = 0.5;

/// `2^exp` as an exact `f64`.
pub fn threshold_from_exp(exp: i32) -> Result<f64> {
    if !(-1074..=1023).contains(&exp) {
        return Err(Error::invalid(format!("threshold exponent {exp} out of range")));
    }
    Ok(2f64.powi(exp))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Encoding {
    DenseF32 = 0,
    DenseF16 = 1,
    SparseCooF32 = 2,
}

impl TryFrom<u8> for Encoding {
    type Error = u8;

    fn try_from(tag: u8) -> std::result::Result<Self, u8> {
        match tag {
            0 => Ok(Encoding::DenseF32),
            1 => Ok(Encoding::DenseF16),
            2 => Ok(Encoding::SparseCooF32),
            t => Err(t),
        }
    }
}

/// Coordinate-format tensor: strictly increasing flat indices and values.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    shape: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseTensor {
    pub fn new(shape: Vec<usize>, indices: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 || numel > u32::MAX as usize + 1 {
            return Err(Error::shape(format!("bad sparse shape {shape:?}")));
        }
        if indices.len() != values.len() {
            return Err(Error::shape(format!(
                "{} indices for {} values",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sparse indices must be strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i as usize >= numel) {
            return Err(Error::invalid("sparse index out of range"));
        }
        Ok(SparseTensor { shape, indices, values })
    }

    /// Keeps the nonzero elements with `|w| >= threshold`.
    pub fn from_dense(t: &Tensor<f32>, threshold: f64) -> Self {
        let (indices, values) = t
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0 && (w.abs() as f64) >= threshold)
            .map(|(i, &w)| (i as u32, w))
            .unzip();
        SparseTensor {
            shape: t.shape().to_vec(),
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor<f32> {
        let mut data = vec![0.0; self.numel()];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            data[i as usize] = v;
        }
        Tensor::new(self.shape.clone(), data).expect("validated shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One tensor record of a model file.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    DenseF32(Tensor<f32>),
    /// Raw binary16 bit patterns.
    DenseF16 {
        shape: Vec<usize>,
        bits: Vec<u16>,
    },
    Sparse(SparseTensor),
}

impl StoredTensor {
    pub fn encoding(&self) -> Encoding {
        match self {
            StoredTensor::DenseF32(_) => Encoding::DenseF32,
            StoredTensor::DenseF16 { .. } => Encoding::DenseF16,
            StoredTensor::Sparse(_) => Encoding::SparseCooF32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::DenseF32(t) => t.shape(),
            StoredTensor::DenseF16 { shape, .. } => shape,
            StoredTensor::Sparse(s) => s.shape(),
        }
    }

    /// Values as `f32` for compute.
    pub fn to_dense(&self) -> Tensor<f32> {
        match self {
            StoredTensor::DenseF32(t) => t.clone(),
            StoredTensor::DenseF16 { shape, bits } => Tensor::new(
                shape.clone(),
                bits.iter().map(|&b| f16::from_bits(b).to_f32()).collect(),
            )
            .expect("validated shape"),
            StoredTensor::Sparse(s) => s.to_dense(),
        }
    }
}

/// A model in storage form: architecture plus named tensor records.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub spec: ArchSpec,
    pub tensors: IndexMap<String, StoredTensor>,
}

impl CompressedModel {
    /// Dense `f32` records of every parameter and buffer.
    pub fn dense(model: &ModelParams) -> Self {
        CompressedModel {
            spec: model.spec,
            tensors: model
                .tensors()
                .map(|(n, t)| (n.clone(), StoredTensor::DenseF32(t.clone())))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<ModelParams> {
        ModelParams::from_named(self.spec, self.tensors.iter().map(|(n, t)| (n.clone(), t.to_dense())))
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.values().map(tensor_payload_bytes).sum()
    }

    /// Re-encodes every dense `f32` record as binary16; sparse records stay.
    pub fn to_half(&self) -> (CompressedModel, HalfStats) {
        let mut stats = HalfStats::default();
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let out = match t {
                    StoredTensor::DenseF32(d) => {
                        let (bits, clamped) = quantize_f16(d.data());
                        stats.converted += d.len();
                        stats.clamped += clamped;
                        StoredTensor::DenseF16 {
                            shape: d.shape().to_vec(),
                            bits,
                        }
                    }
                    other => other.clone(),
                };
                (name.clone(), out)
            })
            .collect();
        (
            CompressedModel {
                spec: self.spec,
                tensors,
            },
            stats,
        )
    }
}

// ── Half precision ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HalfStats {
    pub converted: usize,
    /// Values beyond the binary16 finite range, stored as `±65504`.
    pub clamped: usize,
}

/// Round-to-nearest-even binary16 bits, clamping overflow to `±max`.
pub fn quantize_f16(values: &[f32]) -> (Vec<u16>, usize) {
    let max = f16::MAX.to_f32();
    let mut clamped = 0;
    let bits = values
        .iter()
        .map(|&v| {
            let v = if v.is_finite() && v.abs() > max {
                clamped += 1;
                v.signum() * max
            } else {
                v
            };
            f16::from_f32(v).to_bits()
        })
        .collect();
    (bits, clamped)
}

/// `f32 → binary16 → f32`.
pub fn round_f16(v: f32) -> f32 {
    let (bits, _) = quantize_f16(&[v]);
    f16::from_bits(bits[0]).to_f32()
}

/// Binary16 storage of every tensor of `model`.
pub fn to_half(model: &ModelParams) -> (CompressedModel, HalfStats) {
    CompressedModel::dense(model).to_half()
}

// ── Pruning ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorPruneStats {
    pub name: String,
    pub total: usize,
    pub removed: usize,
    pub sparse: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PruneStats {
    pub tensors: Vec<TensorPruneStats>,
    pub total: usize,
    pub removed: usize,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::invalid(format!("threshold {threshold} must be positive")));
    }
    Ok(())
}

fn below(t: &Tensor<f32>, threshold: f64) -> usize {
    t.data().iter().filter(|w| (w.abs() as f64) < threshold).count()
}

/// Drops trainable elements with `|w| < threshold`. A tensor is stored
/// sparse when at least half of it is dropped, otherwise dense with zeros.
/// Batch-norm running statistics are kept as is.
pub fn prune(model: &ModelParams, threshold: f64) -> Result<(CompressedModel, PruneStats)> {
    check_threshold(threshold)?;
    let mut stats = PruneStats::default();
    let mut tensors = IndexMap::new();
    for (name, t) in &model.params {
        let removed = below(t, threshold);
        let sparse = removed as f64 >= SPARSE_BREAK_EVEN * t.len() as f64;
        let stored = if sparse {
            StoredTensor::Sparse(SparseTensor::from_dense(t, threshold))
        } else {
            StoredTensor::DenseF32(t.map(|w| if (w.abs() as f64) < threshold { 0.0 } else { w }))
        };
        stats.total += t.len();
        stats.removed += removed;
        stats.tensors.push(TensorPruneStats {
            name: name.clone(),
            total: t.len(),
            removed,
            sparse,
        });
        tensors.insert(name.clone(), stored);
    }
    for (name, t) in &model.buffers {
        tensors.insert(name.clone(), StoredTensor::DenseF32(t.clone()));
    }
    Ok((
        CompressedModel {
            spec: model.spec,
            tensors,
        },
        stats,
    ))
}

// ── Reporting ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorSparsity {
    pub name: String,
    pub total: usize,
    pub below: usize,
    pub exact_zeros: usize,
    /// Nonzero magnitudes bucketed by `floor(log2 |w|)`.
    pub log2_histogram: BTreeMap<i32, usize>,
}

impl TensorSparsity {
    pub fn fraction_below(&self) -> f64 {
        self.below as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub tensors: Vec<TensorSparsity>,
    pub total: usize,
    pub below: usize,
    /// File size after `prune` at the same threshold.
    pub projected_file_bytes: usize,
}

impl SparsityReport {
    pub fn fraction_below(&self) -> f64 {
        self.below as f64 / self.total as f64
    }
}

pub fn sparsity_report(model: &ModelParams, threshold: f64) -> Result<SparsityReport> {
    check_threshold(threshold)?;
    let tensors: Vec<TensorSparsity> = model
        .params
        .iter()
        .map(|(name, t)| {
            let mut log2_histogram = BTreeMap::new();
            let mut exact_zeros = 0;
            for &w in t.data() {
                if w == 0.0 {
                    exact_zeros += 1;
                } else {
                    *log2_histogram
                        .entry((w.abs() as f64).log2().floor() as i32)
                        .or_insert(0) += 1;
                }
            }
            TensorSparsity {
                name: name.clone(),
                total: t.len(),
                below: below(t, threshold),
                exact_zeros,
                log2_histogram,
            }
        })
        .collect();
    let (pruned, _) = prune(model, threshold)?;
    Ok(SparsityReport {
        threshold,
        total: tensors.iter().map(|t| t.total).sum(),
        below: tensors.iter().map(|t| t.below).sum(),
        tensors,
        projected_file_bytes: serialize(&pruned)?.len(),
    })
}
