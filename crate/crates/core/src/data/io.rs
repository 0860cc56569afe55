use std::path::Path;

use super::{Dataset, DatasetManifest, GestureSample, FRAME_BYTES, FRAME_CHANNELS, FRAME_SIZE};
use crate::codec::{put_json, read_file, write_atomic, ByteReader};
use crate::error::DecodeError;
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"GKDD";
const VERSION: u32 = 1;

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let m = &dataset.manifest;
    if dataset.samples.len() != m.counts.total() {
        return Err(Error::invalid(format!(
            "manifest declares {} samples, dataset has {}",
            m.counts.total(),
            dataset.samples.len()
        )));
    }
    let bytes: usize = dataset
        .samples
        .iter()
        .map(|s| 12 + 3 * s.frame_count() + s.pixels.len())
        .sum();
    let mut out = Vec::with_capacity(64 + bytes);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_json(&mut out, m)?;
    let count = u32::try_from(dataset.samples.len()).map_err(|_| Error::invalid("too many samples"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in &dataset.samples {
        let t = s.frame_count();
        let frames = u16::try_from(t).map_err(|_| Error::invalid(format!("sample {}: too many frames", s.id)))?;
        if s.keypoints.len() != t {
            return Err(Error::invalid(format!("sample {}: missing keypoints", s.id)));
        }
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&s.label.to_le_bytes());
        out.extend_from_slice(&frames.to_le_bytes());
        out.extend_from_slice(&[FRAME_CHANNELS as u8, FRAME_SIZE as u8, FRAME_SIZE as u8]);
        out.extend(s.keypoints.iter().flatten());
        out.extend_from_slice(&s.pixels);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let manifest: DatasetManifest = r.json("manifest")?;
    let count = r.u32("sample count")? as usize;
    if count != manifest.counts.total() {
        return Err(DecodeError::Record(format!(
            "file holds {count} samples, manifest declares {}",
            manifest.counts.total()
        ))
        .into());
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32("sample id")?;
        let label = r.u16("label")?;
        let frames = r.u16("frame count")? as usize;
        let [c, h, w] = r.array::<3>("frame geometry")?;
        if (c as usize, h as usize, w as usize) != (FRAME_CHANNELS, FRAME_SIZE, FRAME_SIZE) {
            return Err(DecodeError::Record(format!("sample {id}: unsupported geometry {c}×{h}×{w}")).into());
        }
        if frames == 0 {
            return Err(DecodeError::Record(format!("sample {id}: zero frames")).into());
        }
        if label as usize >= manifest.class_count {
            return Err(DecodeError::Record(format!("sample {id}: label {label} out of range")).into());
        }
        let keypoints = r
            .take(2 * frames, "keypoints")?
            .chunks_exact(2)
            .map(|k| [k[0], k[1]])
            .collect();
        let pixels = r.take(frames * FRAME_BYTES, "pixels")?.to_vec();
        let sample =
            GestureSample::new(id, label, keypoints, pixels).map_err(|e| DecodeError::Record(e.to_string()))?;
        samples.push(sample);
    }
    r.finish()?;
    Ok(Dataset { manifest, samples })
}

pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(dataset)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_file(path.as_ref())?)
}
