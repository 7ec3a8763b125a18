//! EMC1 checkpoint format.
//!
//! Layout: magic `EMC1`, u32 little-endian entry count, then per entry a u32
//! name length, the UTF-8 name, and an EMT1-encoded tensor. The model config
//! is stored under the reserved name `__config__` as UTF-8 JSON packed into a
//! rank-1 f32 tensor (one byte value per element), keeping every entry plain
//! EMT1. The config entry comes first; parameter entries follow in sorted
//! name order, so checkpoints are byte-identical across runs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use crate::tensor_io::{decode_tensor, encode_tensor, DynTensor};

pub const EMC1_MAGIC: &[u8; 4] = b"EMC1";
pub const CONFIG_ENTRY: &str = "__config__";

const MAX_ENTRIES: u32 = 65_536;
const MAX_NAME_LEN: u32 = 4_096;

/// Parameters of either dtype, as read from a checkpoint.
pub enum DynParameters {
    F32(Parameters<f32>),
    F64(Parameters<f64>),
}

impl DynParameters {
    pub fn dtype(&self) -> DType {
        match self {
            DynParameters::F32(_) => DType::F32,
            DynParameters::F64(_) => DType::F64,
        }
    }
}

fn config_to_tensor(config: &ModelConfig) -> Tensor<f32> {
    let json = serde_json::to_string(config).expect("config serializes");
    let data: Vec<f32> = json.bytes().map(|b| b as f32).collect();
    Tensor::from_vec_unchecked(vec![data.len()], data)
}

fn config_from_tensor(t: &Tensor<f32>) -> Result<ModelConfig> {
    if t.rank() != 1 {
        return Err(Error::Format("__config__ entry must be rank 1".into()));
    }
    let mut bytes = Vec::with_capacity(t.len());
    for &v in t.data() {
        if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
            return Err(Error::Format("__config__ entry holds non-byte values".into()));
        }
        bytes.push(v as u8);
    }
    let json = String::from_utf8(bytes)
        .map_err(|_| Error::Format("__config__ entry is not UTF-8".into()))?;
    serde_json::from_str(&json).map_err(|e| Error::Format(format!("bad __config__ JSON: {e}")))
}

pub fn encode_checkpoint<T: Element>(params: &Parameters<T>, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(EMC1_MAGIC);
    let count = params.len() as u32 + 1;
    out.extend_from_slice(&count.to_le_bytes());

    let mut push_entry = |name: &str, tensor_bytes: &[u8]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(tensor_bytes);
    };

    push_entry(CONFIG_ENTRY, &encode_tensor(&config_to_tensor(config)));
    for (name, t) in params.iter() {
        push_entry(name, &encode_tensor(t));
    }
    out
}

/// Defensive decode of checkpoint bytes. All entries must share one dtype
/// and a `__config__` entry must be present.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DynParameters, ModelConfig)> {
    if bytes.len() < 8 {
        return Err(Error::Format("EMC1 header truncated".into()));
    }
    if &bytes[..4] != EMC1_MAGIC {
        return Err(Error::Format("bad EMC1 magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if count == 0 || count > MAX_ENTRIES {
        return Err(Error::Format(format!("implausible EMC1 entry count {count}")));
    }
    let mut off = 8usize;
    let mut config: Option<ModelConfig> = None;
    let mut f32_map: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut f64_map: BTreeMap<String, Tensor<f64>> = BTreeMap::new();

    for _ in 0..count {
        let Some(raw) = bytes.get(off..off + 4) else {
            return Err(Error::Format("EMC1 entry header truncated".into()));
        };
        let name_len = u32::from_le_bytes(raw.try_into().unwrap());
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::Format(format!("implausible EMC1 name length {name_len}")));
        }
        off += 4;
        let Some(name_raw) = bytes.get(off..off + name_len as usize) else {
            return Err(Error::Format("EMC1 entry name truncated".into()));
        };
        let name = std::str::from_utf8(name_raw)
            .map_err(|_| Error::Format("EMC1 entry name is not UTF-8".into()))?
            .to_string();
        off += name_len as usize;
        let (tensor, consumed) = decode_tensor(&bytes[off..])?;
        off += consumed;

        if name == CONFIG_ENTRY {
            if config.is_some() {
                return Err(Error::Format("duplicate __config__ entry".into()));
            }
            config = Some(config_from_tensor(&tensor.into_f32().map_err(|_| {
                Error::Format("__config__ entry must be an f32 tensor".into())
            })?)?);
            continue;
        }
        let duplicate = match tensor {
            DynTensor::F32(t) => f32_map.insert(name.clone(), t).is_some(),
            DynTensor::F64(t) => f64_map.insert(name.clone(), t).is_some(),
        };
        if duplicate {
            return Err(Error::Format(format!("duplicate checkpoint entry {name}")));
        }
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "EMC1 trailing garbage: {} extra bytes",
            bytes.len() - off
        )));
    }
    let config = config.ok_or_else(|| Error::Format("checkpoint lacks __config__".into()))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;

    let params = match (f32_map.is_empty(), f64_map.is_empty()) {
        (false, true) => DynParameters::F32(Parameters::from_map(f32_map)),
        (true, false) => DynParameters::F64(Parameters::from_map(f64_map)),
        (true, true) => return Err(Error::Format("checkpoint holds no parameters".into())),
        (false, false) => {
            return Err(Error::Format("checkpoint mixes f32 and f64 tensors".into()))
        }
    };
    Ok((params, config))
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    params: &Parameters<T>,
    config: &ModelConfig,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode_checkpoint(params, config))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DynParameters, ModelConfig)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            layers: 1,
            heads: 2,
            vocab_size: crate::encoder::tokenizer::VOCAB_SIZE,
            max_seq: 16,
            patch_size: 4,
            image_channels: 1,
            lora_rank: 0,
            lora_alpha: 16.0,
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let config = cfg();
        let params = Parameters::<f32>::init(&config, 42).unwrap();
        let bytes = encode_checkpoint(&params, &config);
        let (loaded, loaded_cfg) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(loaded_cfg, config);
        match loaded {
            DynParameters::F32(p) => {
                assert_eq!(p.len(), params.len());
                for (name, t) in params.iter() {
                    assert!(t.bit_eq(p.get(name).unwrap()), "{name} changed");
                }
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let config = cfg();
        let params = Parameters::<f64>::init(&config, 1).unwrap();
        assert_eq!(
            encode_checkpoint(&params, &config),
            encode_checkpoint(&params, &config)
        );
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_checkpoint(b"EMC1").is_err());
        assert!(decode_checkpoint(b"NOPE\x00\x00\x00\x00").is_err());
        // entry count claims more than present
        let mut buf = b"EMC1".to_vec();
        buf.extend_from_slice(&5u32.to_le_bytes());
        assert!(decode_checkpoint(&buf).is_err());
        // valid checkpoint with trailing garbage
        let config = cfg();
        let params = Parameters::<f32>::init(&config, 0).unwrap();
        let mut bytes = encode_checkpoint(&params, &config);
        bytes.push(7);
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn missing_config_rejected() {
        // hand-build a checkpoint with a single tensor and no __config__
        let mut buf = b"EMC1".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        let name = b"weights";
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&crate::tensor_io::encode_tensor(&Tensor::scalar(1.0f32)));
        assert!(decode_checkpoint(&buf).is_err());
    }
}
