use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::format::header_parse;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub mlp_ratio: usize,
    /// Classes of the task the backbone head was trained on.
    pub class_count: usize,
    pub prompt_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            embed_dim: 64,
            layer_count: 4,
            head_count: 4,
            mlp_ratio: 4,
            class_count: 4,
            prompt_len: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("layer_count", self.layer_count),
            ("head_count", self.head_count),
            ("mlp_ratio", self.mlp_ratio),
            ("class_count", self.class_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be >= 1")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Parameter(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.head_count != 0 {
            return Err(Error::Parameter(format!(
                "embed_dim {} not divisible by head_count {}",
                self.embed_dim, self.head_count
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.head_count
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Tokens per layer in prompted mode: CLS + K prompts + m patches.
    pub fn prompted_seq_len(&self) -> usize {
        1 + self.prompt_len + self.patch_count()
    }

    pub(crate) fn to_entries(&self) -> BTreeMap<String, String> {
        [
            ("config.channels", self.channels),
            ("config.class_count", self.class_count),
            ("config.embed_dim", self.embed_dim),
            ("config.head_count", self.head_count),
            ("config.image_size", self.image_size),
            ("config.layer_count", self.layer_count),
            ("config.mlp_ratio", self.mlp_ratio),
            ("config.patch_size", self.patch_size),
            ("config.prompt_len", self.prompt_len),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub(crate) fn from_entries(h: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = Self {
            image_size: header_parse(h, "config.image_size")?,
            channels: header_parse(h, "config.channels")?,
            patch_size: header_parse(h, "config.patch_size")?,
            embed_dim: header_parse(h, "config.embed_dim")?,
            layer_count: header_parse(h, "config.layer_count")?,
            head_count: header_parse(h, "config.head_count")?,
            mlp_ratio: header_parse(h, "config.mlp_ratio")?,
            class_count: header_parse(h, "config.class_count")?,
            prompt_len: header_parse(h, "config.prompt_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
