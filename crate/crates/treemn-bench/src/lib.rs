//! Shared fixtures for the criterion benchmarks.

use treemn_core::data::{generate_synthetic, load_dataset, LoadedDataset, SyntheticConfig};
use treemn_core::model::{ModelDims, ModelParams, Variant};
use treemn_core::rng::substream;

/// A small but non-trivial benchmark dataset, generated once under the
/// system temp directory and reused across runs.
pub fn bench_dataset() -> LoadedDataset {
    let dir = std::env::temp_dir().join("treemn_bench_data");
    let config = SyntheticConfig {
        train_samples: 64,
        val_samples: 16,
        test_samples: 16,
        frames: 16,
        feature_dim: 64,
        embed_dim: 16,
        noise_sigma: 0.05,
        key_segment_len: 4,
        long_question_fraction: 0.5,
        seed: 99,
        ..SyntheticConfig::default()
    };
    if !dir.join("train/questions.jsonl").exists() {
        generate_synthetic(&config, &dir).expect("generate bench data");
    }
    load_dataset(&dir, None).expect("load bench data")
}

pub fn bench_model(ds: &LoadedDataset, variant: Variant, hidden: usize) -> ModelParams {
    let dims = ModelDims {
        hidden,
        video_dim: 64,
        embed_dim: 16,
        num_answers: ds.answer_vocab.len(),
    };
    let mut rng = substream(123, "bench-init");
    ModelParams::new(variant, dims, ds.answer_vocab.clone(), &mut rng).expect("model init")
}
