//! Model snapshot: magic `SSTM`, version `u16`, header length `u32`, a JSON
//! header with the architecture and the parameter table, then every
//! parameter's values as little-endian `f64` in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::model::{ModelConfig, WeaNet};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"SSTM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
}

pub fn encode_model(model: &WeaNet) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        config: model.config().clone(),
        params: params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<WeaNet> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || bytes[..4] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MODEL_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 10 {
        return Err(truncated(10));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 10 + hlen {
        return Err(truncated(10 + hlen));
    }
    let header: Header = serde_json::from_slice(&bytes[10..10 + hlen])?;
    let total: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let expected = 10 + hlen + 8 * total;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let mut model = WeaNet::new(header.config, 0)?;
    let mut values = bytes[10 + hlen..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut loaded = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::ArchitectureMismatch { detail: e.to_string() })?;
        loaded.push((name, t));
    }
    model.load_params(loaded)?;
    Ok(model)
}

pub fn save_model(model: &WeaNet, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<WeaNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(path, &bytes)
}

/// Loads a snapshot and checks it against the expected architecture.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<WeaNet> {
    let model = load_model(path)?;
    check_compatible(model.config(), expected)?;
    Ok(model)
}

pub fn check_compatible(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if found.n_classes != expected.n_classes {
        return Err(Error::ClassCountMismatch {
            model: found.n_classes,
            data: expected.n_classes,
        });
    }
    if found != expected {
        return Err(Error::ArchitectureMismatch {
            detail: format!(
                "snapshot architecture {} differs from the configured {}",
                serde_json::to_string(found)?,
                serde_json::to_string(expected)?
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_prefix() {
        let m = WeaNet::new(ModelConfig::default(), 3).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert_eq!(&bytes[..4], b"SSTM");
        let back = decode_model(Path::new("m"), &bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_and_magic() {
        let m = WeaNet::new(ModelConfig::default(), 3).unwrap();
        let bytes = encode_model(&m).unwrap();
        assert!(matches!(
            decode_model(Path::new("m"), &bytes[..bytes.len() - 8]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            decode_model(Path::new("m"), b"SSTN\x01\x00"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn class_mismatch_names_both_counts() {
        let a = ModelConfig::default();
        let b = ModelConfig { n_classes: 5, ..a.clone() };
        let err = check_compatible(&a, &b).unwrap_err();
        assert!(matches!(err, Error::ClassCountMismatch { model: 8, data: 5 }));
        let msg = err.to_string();
        assert!(msg.contains('8') && msg.contains('5'));
    }
}
