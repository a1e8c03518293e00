use rayon::prelude::*;

use super::dataset::Dataset;
use super::tune::TunedModel;
use crate::backbone::BackboneCheckpoint;
use crate::corruption::{CorruptionSpec, Family};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub family: Family,
    pub intensity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub clean: f64,
    /// One cell per grid entry, in grid order.
    pub cells: Vec<Cell>,
}

impl EvalReport {
    /// Families in order of first appearance.
    pub fn families(&self) -> Vec<Family> {
        let mut out: Vec<Family> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.family) {
                out.push(c.family);
            }
        }
        out
    }

    pub fn family_cells(&self, family: Family) -> Vec<Cell> {
        self.cells.iter().copied().filter(|c| c.family == family).collect()
    }

    /// Arithmetic mean of the family's cells, summed in grid order.
    pub fn family_average(&self, family: Family) -> Option<f64> {
        mean(self.cells.iter().filter(|c| c.family == family).map(|c| c.accuracy))
    }

    pub fn cell(&self, family: Family, intensity: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.family == family && c.intensity == intensity)
            .map(|c| c.accuracy)
    }
}

/// `sum / n` over the items in iteration order; `None` when empty.
pub fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn accuracy_on(model: &TunedModel, ckpt: &BackboneCheckpoint, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    let hits = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(im, &l)| model.forward(im, ckpt).map(|a| usize::from(a.predicted_class() == l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.into_iter().sum::<usize>() as f64 / images.len() as f64)
}

/// Corrupts every image with `spec`, using the image index as the noise stream.
pub fn corrupt_all(images: &[Tensor], spec: &CorruptionSpec) -> Result<Vec<Tensor>> {
    spec.validate()?;
    images
        .par_iter()
        .enumerate()
        .map(|(i, im)| spec.apply(im, i as u64))
        .collect()
}

/// Clean accuracy plus one accuracy per corruption cell.
pub fn evaluate(
    model: &TunedModel,
    ckpt: &BackboneCheckpoint,
    test: &Dataset,
    grid: &[CorruptionSpec],
) -> Result<EvalReport> {
    model.check_backbone(ckpt)?;
    if test.is_empty() {
        return Err(Error::Contract("empty test split".into()));
    }
    if grid.is_empty() {
        eprintln!("warning: empty corruption grid, reporting clean accuracy only");
    }
    let clean = accuracy_on(model, ckpt, &test.images, &test.labels)?;
    let cells = grid
        .iter()
        .map(|spec| {
            let corrupted = corrupt_all(&test.images, spec)?;
            Ok(Cell {
                family: spec.family,
                intensity: spec.intensity,
                accuracy: accuracy_on(model, ckpt, &corrupted, &test.labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        method: model.method().name().to_string(),
        seed: model.config.seed,
        config_hash: model.config.config_hash(),
        clean,
        cells,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

fn pooled_patch_tokens(tokens: &Tensor, skip: usize) -> Vec<f64> {
    let (rows, d) = tokens.dims2().expect("token matrix");
    let mut out = vec![0.0; d];
    for r in skip..rows {
        for (o, v) in out.iter_mut().zip(tokens.row(r)) {
            *o += v;
        }
    }
    let n = (rows - skip) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Per-layer mean cosine similarity between the mean-pooled patch tokens of
/// paired clean and corrupted images.
pub fn feature_similarity(
    model: &TunedModel,
    ckpt: &BackboneCheckpoint,
    clean: &[Tensor],
    corrupted: &[Tensor],
    layers: &[usize],
) -> Result<Vec<f64>> {
    if clean.len() != corrupted.len() || clean.is_empty() {
        return Err(Error::Contract(format!(
            "need equally many clean and corrupted images, got {} and {}",
            clean.len(),
            corrupted.len()
        )));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= ckpt.config.layer_count) {
        return Err(Error::Index(format!("layer {l} of {}", ckpt.config.layer_count)));
    }
    let skip = 1 + model.injected.first().map_or(0, |p| p.shape()[0]);
    let per_pair = clean
        .par_iter()
        .zip(corrupted.par_iter())
        .map(|(a, b)| {
            let fa = model.forward(a, ckpt)?;
            let fb = model.forward(b, ckpt)?;
            Ok(layers
                .iter()
                .map(|&l| {
                    cosine(
                        &pooled_patch_tokens(&fa.per_layer[l], skip),
                        &pooled_patch_tokens(&fb.per_layer[l], skip),
                    )
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..layers.len())
        .map(|j| mean(per_pair.iter().map(|v| v[j])).expect("non-empty"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[1.0, 1.0], &[-2.0, -2.0]), -1.0);
        assert_eq!(cosine(&[0.0], &[0.0]), 1.0);
    }

    #[test]
    fn mean_is_in_order_sum_over_count() {
        assert_eq!(mean([0.1, 0.2, 0.3].into_iter()), Some((0.1 + 0.2 + 0.3) / 3.0));
        assert_eq!(mean(std::iter::empty()), None);
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(a in proptest::collection::vec(-1e3f64..1e3, 1..20), b in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let n = a.len().min(b.len());
            let c = cosine(&a[..n], &b[..n]);
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert_eq!(cosine(&a, &a), 1.0);
        }
    }
}
