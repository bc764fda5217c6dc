//! Versioned checkpoint container:
//!
//! ```text
//! "SPSSCKPT" | u32 version | u32 header_len | header JSON | raw LE parameters
//! ```
//!
//! The header carries the backbone config, precision, step counter, seed,
//! the tensor table and the architecture interpretation notes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::real::Real;
use super::unet::{BackboneConfig, ModelState, TensorSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SPSSCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: BackboneConfig,
    pub precision: String,
    pub step: u64,
    pub seed: u64,
    pub param_count: usize,
    pub tensors: Vec<TensorSpec>,
    pub architecture_notes: Vec<String>,
}

pub fn architecture_notes() -> Vec<String> {
    vec![
        "contracting block: two 3x3 conv + ReLU, widths base*2^l, then 2x2 max-pool".into(),
        "expansive block: one stride-2 3x3 transposed conv + ReLU, concat skip, one 3x3 conv + ReLU".into(),
        "zero padding keeps spatial size; inputs padded to multiples of 16 and outputs cropped".into(),
        "head: 1x1 conv; softmax across channels when n_out > 1, sigmoid when n_out == 1".into(),
        "init: Glorot uniform weights, ReLU biases 0.1, head bias zero or the log class prior".into(),
    ]
}

pub fn to_bytes<T: Real>(model: &ModelState<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        precision: T::NAME.to_string(),
        step: model.step,
        seed: model.seed(),
        param_count: model.param_count(),
        tensors: model.tensors().to_vec(),
        architecture_notes: architecture_notes(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &p in model.params() {
        p.write_le(&mut out);
    }
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + len])?;
    Ok((header, &bytes[16 + len..]))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ModelState<T>> {
    let (header, body) = read_header(bytes)?;
    if header.precision != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            header.precision,
            T::NAME
        )));
    }
    if body.len() != header.param_count * T::BYTES {
        return Err(Error::Checkpoint("parameter block length mismatch".into()));
    }
    let params = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    ModelState::from_parts(header.config, params, header.step, header.seed)
}

pub fn save<T: Real>(path: &Path, model: &ModelState<T>) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<ModelState<T>> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// A checkpoint of either precision.
#[derive(Debug)]
pub enum AnyModel {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

pub fn load_any(path: &Path) -> Result<AnyModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = read_header(&bytes)?;
    match header.precision.as_str() {
        "f32" => Ok(AnyModel::F32(from_bytes(&bytes)?)),
        "f64" => Ok(AnyModel::F64(from_bytes(&bytes)?)),
        other => Err(Error::Checkpoint(format!("unknown precision {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackboneConfig;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut m = ModelState::<f32>::build(BackboneConfig::new(3, 2, 4), 9).unwrap();
        m.step = 17;
        let bytes = to_bytes(&m).unwrap();
        let back: ModelState<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.step, 17);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert!(from_bytes::<f64>(&bytes).is_err());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
