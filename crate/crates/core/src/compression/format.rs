//! `.gkdm` model files, little-endian:
//!
//! ```text
//! "GKDM" | u32 version=1 | u32 len + descriptor JSON | u32 tensor count
//! per tensor: u16 len + name | u8 encoding | u8 rank | u32 dims[rank] | payload
//!   dense-f32: f32[numel]   dense-f16: u16[numel]
//!   sparse:    u64 count | u32 indices[count] | f32 values[count]
//! ```

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{CompressedModel, Encoding, SparseTensor, StoredTensor};
use crate::codec::{put_json, read_file, write_atomic, ByteReader};
use crate::data::InputMode;
use crate::error::DecodeError;
use crate::models::{ArchSpec, Family, LayerTable, WidthScale};
use crate::{Error, Result, Tensor};

const MAGIC: [u8; 4] = *b"GKDM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    family: Family,
    width_numerator: u32,
    width_denominator: u32,
    class_count: usize,
    input_channels: usize,
    input_mode: InputMode,
    frame_size: usize,
    layers: LayerTable,
}

impl Descriptor {
    fn of(spec: &ArchSpec) -> Result<Self> {
        Ok(Descriptor {
            family: spec.family,
            width_numerator: spec.width.numerator,
            width_denominator: spec.width.denominator,
            class_count: spec.class_count,
            input_channels: spec.input_channels,
            input_mode: spec.input_mode,
            frame_size: spec.frame_size,
            layers: spec.layer_table()?,
        })
    }

    fn spec(&self) -> Result<ArchSpec, DecodeError> {
        let bad = |e: Error| DecodeError::Descriptor(e.to_string());
        let spec = ArchSpec {
            family: self.family,
            width: WidthScale::new(self.width_numerator, self.width_denominator).map_err(bad)?,
            class_count: self.class_count,
            input_channels: self.input_channels,
            input_mode: self.input_mode,
            frame_size: self.frame_size,
        };
        if spec.layer_table().map_err(bad)? != self.layers {
            return Err(DecodeError::Descriptor(
                "layer table does not match the architecture".into(),
            ));
        }
        Ok(spec)
    }
}

/// Payload bytes of one record (excluding its name/shape header).
pub fn tensor_payload_bytes(t: &StoredTensor) -> usize {
    match t {
        StoredTensor::DenseF32(d) => 4 * d.len(),
        StoredTensor::DenseF16 { bits, .. } => 2 * bits.len(),
        StoredTensor::Sparse(s) => 8 + 8 * s.nnz(),
    }
}

pub fn serialize(model: &CompressedModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + model.payload_bytes() + 64 * model.tensors.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_json(&mut out, &Descriptor::of(&model.spec)?)?;
    let count = u32::try_from(model.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &model.tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name {name} too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.encoding() as u8);
        let shape = t.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::shape(format!("tensor {name} rank too large")))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::shape(format!("tensor {name} dim too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            StoredTensor::DenseF32(d) => d.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::DenseF16 { bits, .. } => bits.iter().for_each(|b| out.extend_from_slice(&b.to_le_bytes())),
            StoredTensor::Sparse(s) => {
                out.extend_from_slice(&(s.nnz() as u64).to_le_bytes());
                s.indices().iter().for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                s.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    Ok(out)
}

fn read_f32s(r: &mut ByteReader<'_>, n: usize, what: &'static str) -> Result<Vec<f32>, DecodeError> {
    let raw = r.take(n.checked_mul(4).ok_or(DecodeError::Truncated(what))?, what)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_record(r: &mut ByteReader<'_>) -> Result<(String, StoredTensor), DecodeError> {
    let name_len = r.u16("tensor name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
        .map_err(|_| DecodeError::Record("tensor name is not UTF-8".into()))?;
    let encoding = Encoding::try_from(r.u8("encoding")?).map_err(DecodeError::UnknownEncoding)?;
    let rank = r.u8("rank")? as usize;
    let shape = (0..rank)
        .map(|_| r.u32("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| rank > 0 && n > 0)
        .ok_or_else(|| DecodeError::Record(format!("tensor {name} has invalid shape {shape:?}")))?;
    let stored = match encoding {
        Encoding::DenseF32 => {
            let data = read_f32s(r, numel, "dense f32 payload")?;
            StoredTensor::DenseF32(Tensor::new(shape, data).map_err(|e| DecodeError::Record(e.to_string()))?)
        }
        Encoding::DenseF16 => {
            let raw = r.take(
                numel
                    .checked_mul(2)
                    .ok_or(DecodeError::Truncated("dense f16 payload"))?,
                "dense f16 payload",
            )?;
            let bits = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
            StoredTensor::DenseF16 { shape, bits }
        }
        Encoding::SparseCooF32 => {
            let count =
                usize::try_from(r.u64("sparse count")?).map_err(|_| DecodeError::Truncated("sparse indices"))?;
            if count > numel {
                return Err(DecodeError::Record(format!(
                    "tensor {name}: {count} entries exceed {numel} elements"
                )));
            }
            let raw = r.take(
                count.checked_mul(4).ok_or(DecodeError::Truncated("sparse indices"))?,
                "sparse indices",
            )?;
            let indices: Vec<u32> = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let values = read_f32s(r, count, "sparse values")?;
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DecodeError::NonMonotoneSparse(name));
            }
            if indices.last().is_some_and(|&i| i as usize >= numel) {
                return Err(DecodeError::SparseIndexOutOfRange(name));
            }
            StoredTensor::Sparse(
                SparseTensor::new(shape, indices, values).map_err(|e| DecodeError::Record(e.to_string()))?,
            )
        }
    };
    Ok((name, stored))
}

/// Parses a model file and checks its records against the architecture.
pub fn deserialize(bytes: &[u8]) -> Result<CompressedModel> {
    let mut r = ByteReader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let descriptor: Descriptor = r.json("descriptor")?;
    let spec = descriptor.spec()?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = read_record(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(DecodeError::Record(format!("duplicate tensor {name}")).into());
        }
    }
    r.finish()?;

    let mut expected: IndexMap<String, Vec<usize>> = spec.param_shapes()?.into_iter().collect();
    expected.extend(spec.buffer_shapes()?);
    for (name, t) in &tensors {
        match expected.shift_remove(name) {
            Some(shape) if shape == t.shape() => {}
            Some(shape) => {
                return Err(DecodeError::Record(format!(
                    "tensor {name} has shape {:?}, architecture needs {shape:?}",
                    t.shape()
                ))
                .into())
            }
            None => return Err(DecodeError::Record(format!("unexpected tensor {name}")).into()),
        }
    }
    if let Some(missing) = expected.keys().next() {
        return Err(DecodeError::Record(format!("missing tensor {missing}")).into());
    }
    Ok(CompressedModel { spec, tensors })
}

pub fn save_model(model: &CompressedModel, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = serialize(model)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(bytes.len())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CompressedModel> {
    deserialize(&read_file(path.as_ref())?)
}
