use std::collections::BTreeMap;

use rayon::prelude::*;

use super::dataset::Dataset;
use super::{epoch_batches, f64_entry};
use crate::backbone::{forward_tape, patch_embed_tape, BackboneCheckpoint, BackboneConfig, BackboneVars, Provenance};
use crate::backbone::{forward_prompted, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::format::{canonical_text, sha256_hex};
use crate::tensor::{Sgd, Tape};

/// Full-parameter supervised training of a fresh backbone on the source task.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig {
                embed_dim: 32,
                ..BackboneConfig::default()
            },
            epochs: 20,
            batch_size: 32,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0001,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let mut h = self.backbone.to_entries();
        h.insert("pretrain.batch_size".into(), self.batch_size.to_string());
        h.insert("pretrain.epochs".into(), self.epochs.to_string());
        h.insert("pretrain.lr".into(), f64_entry(self.lr));
        h.insert("pretrain.momentum".into(), f64_entry(self.momentum));
        h.insert("pretrain.seed".into(), self.seed.to_string());
        h.insert("pretrain.weight_decay".into(), f64_entry(self.weight_decay));
        h
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "bad optimizer settings lr={} momentum={} weight_decay={}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    /// Accuracy of the final weights on the source training split.
    pub train_accuracy: f64,
}

struct ImageStep {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn image_step(ckpt: &BackboneCheckpoint, image: &crate::tensor::Tensor, label: usize) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let e = patch_embed_tape(&mut tape, &vars, image, &ckpt.config)?;
    let fv = forward_tape(&mut tape, &vars, (vars.head_w, vars.head_b), e, &[], &ckpt.config)?;
    let loss = tape.cross_entropy(fv.logits, &[label])?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = vars
        .ordered
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    Ok(ImageStep {
        loss: loss_value,
        grads,
    })
}

/// Source-task accuracy of a checkpoint through its own head.
pub fn source_accuracy(ckpt: &BackboneCheckpoint, data: &Dataset) -> Result<f64> {
    let correct = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(im, &l)| forward_prompted(im, ckpt, &[]).map(|a| usize::from(a.predicted_class() == l)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains every backbone parameter with mini-batch SGD on `source`.
///
/// The returned checkpoint records the seed and a hash of the recipe
/// (config plus dataset content).
pub fn pretrain_backbone(source: &Dataset, cfg: &PretrainConfig) -> Result<(BackboneCheckpoint, PretrainReport)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Contract("empty source dataset".into()));
    }
    let mut bcfg = cfg.backbone.clone();
    bcfg.class_count = source.class_count;
    let mut ckpt = BackboneCheckpoint::init_random(bcfg, cfg.seed)?;
    let mut recipe = canonical_text(&cfg.to_entries());
    recipe.push_str(&format!("dataset = {}\n", source.content_hash()?));
    ckpt.provenance = Provenance {
        seed: cfg.seed,
        recipe_hash: sha256_hex(recipe.as_bytes()),
        format_version: CHECKPOINT_VERSION,
    };

    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (step, batch) in epoch_batches(source.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let steps = batch
                .par_iter()
                .map(|&i| image_step(&ckpt, &source.images[i], source.labels[i]))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut sum: Vec<Vec<f64>> = steps[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
            for s in &steps {
                if !s.loss.is_finite() {
                    return Err(Error::Training(format!(
                        "pretraining loss became {} at epoch {epoch}, step {step}",
                        s.loss
                    )));
                }
                total += s.loss;
                for (acc, g) in sum.iter_mut().zip(&s.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            for (t, g) in ckpt.weights.values_mut().zip(&sum) {
                t.requires_grad = true;
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                t.accumulate_grad(&scaled)?;
            }
            let mut params: Vec<_> = ckpt.weights.values_mut().collect();
            opt.step(&mut params);
        }
        epoch_loss.push(total / source.len() as f64);
    }
    for t in ckpt.weights.values_mut() {
        t.requires_grad = false;
        t.zero_grad();
    }
    if ckpt.weights.values().any(|t| t.has_nan()) {
        return Err(Error::Training("pretrained weights contain NaN".into()));
    }
    let train_accuracy = source_accuracy(&ckpt, source)?;
    Ok((
        ckpt,
        PretrainReport {
            epoch_loss,
            train_accuracy,
        },
    ))
}
