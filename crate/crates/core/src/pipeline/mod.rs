//! Experiment orchestration: synthetic data, backbone pretraining, prompt
//! tuning for every method variant, corruption-grid evaluation, feature
//! stability and report generation.
//!
//! Every stage is a pure function of its inputs, seeds and config.
//! Per-image work runs on rayon; reductions happen in index order so results
//! do not depend on the thread count.

pub mod dataset;
pub mod eval;
pub mod pretrain;
pub mod report;
pub mod tune;

pub use dataset::{gen_dataset, nearest_centroid_accuracy, Dataset, DatasetSpec, ShapeKind, Split};
pub use eval::{corrupt_all, cosine, evaluate, feature_similarity, Cell, EvalReport};
pub use pretrain::{pretrain_backbone, source_accuracy, PretrainConfig, PretrainReport};
pub use report::{run_ablation_suite, AblationReport, AblationRow, AblationRun, RunManifest};
pub use tune::{inference_prompts, tune, Method, TrainingLog, TuneConfig, TunedModel};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded shuffle of `0..n` for one epoch, chunked into batches.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Shortest round-trip decimal form of a float.
pub(crate) fn f64_entry(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 4, 3, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 3, 1));
        assert_ne!(b, epoch_batches(10, 4, 3, 2));
    }

    #[test]
    fn float_entries_round_trip() {
        for v in [0.1, 1.5, 1e-20, 0.009999999999999998] {
            assert_eq!(f64_entry(v).parse::<f64>().unwrap(), v);
        }
    }
}
