//! `GNET` model files.
//!
//! ```text
//! "GNET" | version: u16 | meta_len: u32 | meta: JSON
//!        | weights: f64 little-endian, parameters in spec order
//!        | crc32 of every preceding byte: u32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkError, NetworkSpec, Param, Result, TrainedNetwork, TrainingMeta, LAYER_KINDS};
use crate::autodiff::Tensor;

pub const GNET_MAGIC: &[u8; 4] = b"GNET";
pub const GNET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: NetworkSpec,
    init_seed: u64,
    training: Option<TrainingMeta>,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

impl TrainedNetwork {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            training: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(GNET_MAGIC);
        out.extend_from_slice(&GNET_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: &str| NetworkError::Malformed {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 14 || &bytes[..4] != GNET_MAGIC {
            return Err(NetworkError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(NetworkError::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != GNET_VERSION {
            return Err(NetworkError::Version {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let meta_len = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
        let meta_bytes = body
            .get(10..10 + meta_len)
            .ok_or_else(|| malformed("metadata block truncated"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(meta_bytes).map_err(|e| malformed(&e.to_string()))?;
        if let Some(kind) = raw
            .pointer("/spec/layers")
            .and_then(|layers| find_unknown_kind(layers))
        {
            return Err(NetworkError::UnknownLayerKind {
                path: path.to_path_buf(),
                kind,
            });
        }
        let meta: Meta = serde_json::from_value(raw).map_err(|e| malformed(&e.to_string()))?;

        let mut words = body[10 + meta_len..].chunks_exact(8);
        let total: usize = meta
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if words.len() != total || !words.remainder().is_empty() {
            return Err(malformed("weight payload length does not match metadata"));
        }
        let params = meta
            .params
            .into_iter()
            .map(|h| {
                let n: usize = h.shape.iter().product();
                let data: Vec<f64> = words
                    .by_ref()
                    .take(n)
                    .map(|w| f64::from_le_bytes(w.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(h.shape, data)
                    .map(|value| Param {
                        name: h.name,
                        value,
                    })
                    .map_err(|e| malformed(&e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        TrainedNetwork::from_parts(meta.spec, params, meta.init_seed, meta.training)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| NetworkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn find_unknown_kind(layers: &serde_json::Value) -> Option<String> {
    for layer in layers.as_array()? {
        let kind = layer.get("kind").and_then(|k| k.as_str()).unwrap_or("<missing>");
        if !LAYER_KINDS.contains(&kind) {
            return Some(kind.to_string());
        }
        if let Some(found) = layer.get("layers").and_then(find_unknown_kind) {
            return Some(found);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build, Classifier, Preset};

    fn reseal(bytes: &mut Vec<u8>) {
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.gnet");
        let net = build(Preset::SmallCnn.spec("cnn", &[1, 8, 8], 10), 7).unwrap();
        net.save(&path).unwrap();
        let back = TrainedNetwork::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.id(), net.id());
        let x = Tensor::filled(vec![3, 1, 8, 8], 0.3);
        let a = net.logits(&x).unwrap();
        let b = back.logits(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn corrupted_checksum_names_the_file() {
        let net = build(Preset::PlainMlp.spec("p", &[2], 2), 7).unwrap();
        let mut bytes = net.to_bytes();
        let k = bytes.len() - 20;
        bytes[k] ^= 1;
        let err = TrainedNetwork::from_bytes(&bytes, Path::new("models/base.gnet")).unwrap_err();
        assert!(matches!(err, NetworkError::Checksum { .. }));
        assert!(err.to_string().contains("models/base.gnet"));
    }

    #[test]
    fn unknown_layer_kind_is_named() {
        let net = build(Preset::ResMlp.spec("r", &[2], 2), 7).unwrap();
        let bytes = net.to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        // Same-length substitution keeps the metadata length prefix valid.
        assert!(text.contains("\"erosion_slot\""));
        let mut patched = bytes.clone();
        let needle = b"\"erosion_slot\"";
        let pos = patched.windows(needle.len()).position(|w| w == needle).unwrap();
        patched[pos..pos + needle.len()].copy_from_slice(b"\"batch_norm12\"");
        reseal(&mut patched);
        match TrainedNetwork::from_bytes(&patched, Path::new("r.gnet")) {
            Err(NetworkError::UnknownLayerKind { kind, .. }) => assert_eq!(kind, "batch_norm12"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = build(Preset::PlainMlp.spec("p", &[2], 2), 7).unwrap();
        let mut bytes = net.to_bytes();
        bytes[4] = 2;
        reseal(&mut bytes);
        assert!(matches!(
            TrainedNetwork::from_bytes(&bytes, Path::new("p.gnet")),
            Err(NetworkError::Version { found: 2, .. })
        ));
    }
}
