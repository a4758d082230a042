//! Fixtures shared by the benchmarks in `benches/`.

use hintvqa::data::synthetic::{generate, SyntheticConfig};
use hintvqa::data::FeatureStore;
use hintvqa::pipeline::{build_vocabulary, prepare_samples, EncodedSample, PipelineConfig};
use hintvqa::{ConvS2S, ModelConfig, Result, Vocabulary};

/// A desk-scale model with prepared synthetic samples (hints and patches).
pub struct Fixture {
    pub model: ConvS2S<f32>,
    pub vocab: Vocabulary,
    pub samples: Vec<EncodedSample>,
}

pub fn desk_fixture(n_samples: usize, seed: u64) -> Result<Fixture> {
    let dir = std::env::temp_dir().join(format!("hintvqa-bench-{}-{seed}", std::process::id()));
    let data = generate(&SyntheticConfig {
        n_samples,
        seed,
        dev_fraction: 0.0,
        ..SyntheticConfig::default()
    })?;
    let paths = data.write(&dir)?;
    let vocab = build_vocabulary(&data.train, Some(&data.hints), 1);
    let store = FeatureStore::new(&paths.features);
    let samples = prepare_samples(
        &data.train,
        Some(&data.hints),
        Some(&store),
        &vocab,
        &PipelineConfig::desk(),
    );
    let _ = std::fs::remove_dir_all(&dir);
    let model = ConvS2S::new(ModelConfig::desk(vocab.len()), seed)?;
    Ok(Fixture {
        model,
        vocab,
        samples: samples?,
    })
}
