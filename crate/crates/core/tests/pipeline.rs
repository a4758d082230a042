use hintvqa::data::synthetic::{generate, SyntheticConfig};
use hintvqa::data::{load_dataset, load_hints, FeatureStore};
use hintvqa::pipeline::{build_vocabulary, prepare_samples, PipelineConfig};
use hintvqa::train::{predict, train, TrainConfig};
use hintvqa::{ConvS2S, HintMode, ModelConfig};

fn small() -> SyntheticConfig {
    SyntheticConfig {
        n_samples: 40,
        seed: 2,
        ..SyntheticConfig::default()
    }
}

#[test]
fn files_reproduce_in_memory_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&small()).unwrap();
    let paths = data.write(dir.path()).unwrap();
    let store = FeatureStore::new(&paths.features);
    let vocab = build_vocabulary(&data.train, Some(&data.hints), 1);
    let cfg = PipelineConfig::desk();

    let direct =
        prepare_samples(&data.train, Some(&data.hints), Some(&store), &vocab, &cfg).unwrap();
    let train = load_dataset(&paths.train).unwrap();
    let hints = load_hints(&paths.hints).unwrap();
    assert_eq!(hints, data.hints);
    let loaded = prepare_samples(&train, Some(&hints), Some(&store), &vocab, &cfg).unwrap();
    assert_eq!(direct, loaded);
    assert_eq!(direct[0].visual.as_ref().unwrap().rows(), 8);
}

#[test]
fn hint_modes_share_one_architecture() {
    let data = generate(&small()).unwrap();
    let vocab = build_vocabulary(&data.train, Some(&data.hints), 1);
    let counts: Vec<usize> = [
        HintMode::None,
        HintMode::Classifier,
        HintMode::Generative,
        HintMode::Both,
    ]
    .into_iter()
    .map(|hints| {
        let cfg = PipelineConfig {
            hints,
            visual: false,
            ..PipelineConfig::desk()
        };
        let samples = prepare_samples(&data.train, Some(&data.hints), None, &vocab, &cfg).unwrap();
        let model = ConvS2S::<f32>::new(ModelConfig::desk(vocab.len()), 0).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 0,
            checkpoint_every: None,
        };
        train(&model, &samples, &[], &tc, None, |_| {}).unwrap();
        assert_eq!(predict(&model, &samples, 16).unwrap().len(), samples.len());
        model.parameter_count()
    })
    .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}
