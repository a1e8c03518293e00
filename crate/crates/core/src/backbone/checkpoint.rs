use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::format::{
    header_get, header_parse, read_named_tensors, read_preamble, sha256_hex, write_named_tensors, write_preamble,
};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNVPTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    /// SHA-256 of the canonical pretraining recipe text.
    pub recipe_hash: String,
    pub format_version: u32,
}

/// Frozen backbone weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCheckpoint {
    pub config: BackboneConfig,
    pub weights: BTreeMap<String, Tensor>,
    pub provenance: Provenance,
}

/// Every weight name and shape the config requires.
pub fn required_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![cfg.patch_count(), d]),
        ("cls_token".to_string(), vec![1, d]),
        ("norm.weight".to_string(), vec![1, d]),
        ("norm.bias".to_string(), vec![1, d]),
        ("head.weight".to_string(), vec![d, cfg.class_count]),
        ("head.bias".to_string(), vec![1, cfg.class_count]),
    ];
    for l in 0..cfg.layer_count {
        let layer = [
            ("norm1.weight", vec![1, d]),
            ("norm1.bias", vec![1, d]),
            ("attn.qkv.weight", vec![d, 3 * d]),
            ("attn.qkv.bias", vec![1, 3 * d]),
            ("attn.proj.weight", vec![d, d]),
            ("attn.proj.bias", vec![1, d]),
            ("norm2.weight", vec![1, d]),
            ("norm2.bias", vec![1, d]),
            ("mlp.fc1.weight", vec![d, h]),
            ("mlp.fc1.bias", vec![1, h]),
            ("mlp.fc2.weight", vec![h, d]),
            ("mlp.fc2.bias", vec![1, d]),
        ];
        out.extend(layer.into_iter().map(|(n, s)| (format!("layers.{l}.{n}"), s)));
    }
    out
}

impl BackboneCheckpoint {
    /// Seeded random initialization: linear weights ~ N(0, 1/fan_in),
    /// CLS and positional embeddings ~ N(0, 0.02^2), norms at identity,
    /// biases at zero.
    pub fn init_random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = BTreeMap::new();
        for (i, (name, shape)) in required_shapes(&config).into_iter().enumerate() {
            let tseed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)?
            } else if name.contains("norm") {
                Tensor::full(&shape, 1.0)?
            } else if name == "pos_embed" || name == "cls_token" {
                Tensor::randn(&shape, tseed, 0.02)?
            } else {
                Tensor::randn(&shape, tseed, (1.0 / shape[0] as f64).sqrt())?
            };
            weights.insert(name, t);
        }
        Ok(Self {
            config,
            weights,
            provenance: Provenance {
                seed,
                recipe_hash: sha256_hex(b"random-init"),
                format_version: CHECKPOINT_VERSION,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let required = required_shapes(&self.config);
        for (name, shape) in &required {
            match self.weights.get(name) {
                None => return Err(Error::Format(format!("checkpoint is missing `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if self.weights.len() != required.len() {
            let extra: Vec<_> = self
                .weights
                .keys()
                .filter(|k| !required.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::Format(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }

    /// Panics if `name` is absent; validated checkpoints always carry every name.
    pub fn weight(&self, name: &str) -> &Tensor {
        self.weights
            .get(name)
            .unwrap_or_else(|| panic!("checkpoint has no tensor `{name}`"))
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    /// SHA-256 over all weight names and little-endian payloads, in name order.
    pub fn weights_fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in &self.weights {
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    fn header(&self) -> BTreeMap<String, String> {
        let mut h = self.config.to_entries();
        h.insert("provenance.seed".into(), self.provenance.seed.to_string());
        h.insert("provenance.recipe_hash".into(), self.provenance.recipe_hash.clone());
        h.insert("provenance.format_version".into(), self.provenance.format_version.to_string());
        h
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_preamble(w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &self.header())?;
        write_named_tensors(w, self.weights.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_preamble(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let config = BackboneConfig::from_entries(&h)?;
        let known = config.to_entries();
        for key in h.keys() {
            if !known.contains_key(key) && !key.starts_with("provenance.") {
                return Err(Error::Format(format!("unknown checkpoint header key `{key}`")));
            }
        }
        let provenance = Provenance {
            seed: header_parse(&h, "provenance.seed")?,
            recipe_hash: header_get(&h, "provenance.recipe_hash")?.to_string(),
            format_version: header_parse(&h, "provenance.format_version")?,
        };
        let weights: BTreeMap<String, Tensor> = read_named_tensors(r)?.into_iter().collect();
        let ckpt = Self {
            config,
            weights,
            provenance,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            layer_count: 2,
            head_count: 2,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = BackboneCheckpoint::init_random(tiny(), 3).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = BackboneCheckpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let mut ckpt = BackboneCheckpoint::init_random(tiny(), 3).unwrap();
        ckpt.weights.remove("pos_embed");
        assert!(matches!(ckpt.validate(), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let mut ckpt = BackboneCheckpoint::init_random(tiny(), 3).unwrap();
        ckpt.weights.insert("cls_token".into(), Tensor::zeros(&[2, 8]).unwrap());
        let bytes = ckpt.to_bytes().unwrap();
        assert!(BackboneCheckpoint::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let ckpt = BackboneCheckpoint::init_random(tiny(), 3).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        assert!(BackboneCheckpoint::read_from(&mut &bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = BackboneCheckpoint::init_random(tiny(), 9).unwrap();
        let b = BackboneCheckpoint::init_random(tiny(), 9).unwrap();
        let c = BackboneCheckpoint::init_random(tiny(), 10).unwrap();
        assert_eq!(a.weights_fingerprint(), b.weights_fingerprint());
        assert_ne!(a.weights_fingerprint(), c.weights_fingerprint());
    }
}
