#![allow(dead_code)]

use switchtx::data::{prepare_dataset, LabeledDataset, Vocabulary};
use switchtx::model::{EncoderModel, ModelConfig, Variant};
use switchtx::synthetic::{generate_synthetic_corpus, SyntheticConfig};
use switchtx::train::{train, TrainConfig, TrainOutcome};

pub fn synthetic(n: usize, noise: f64, seed: u64, fractions: (f64, f64, f64)) -> (LabeledDataset, Vocabulary) {
    let corpus = generate_synthetic_corpus(&SyntheticConfig { n, noise, seed, ..Default::default() }).unwrap();
    prepare_dataset(corpus.examples, &Default::default(), 2, 256, fractions, 5, true).unwrap()
}

pub fn small_model(variant: Variant, vocab: usize, d: usize, layers: usize, seed: u64) -> EncoderModel {
    EncoderModel::new(ModelConfig {
        variant,
        num_layers: layers,
        num_heads: 2,
        num_experts: 2,
        d_model: d,
        d_ff: 2 * d,
        vocab_size: vocab,
        dropout: 0.1,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// A small dense model trained on a noiseless corpus; shared by tests.
pub fn trained_toy() -> (EncoderModel, Vocabulary, LabeledDataset, TrainOutcome) {
    let (data, vocab) = synthetic(600, 0.0, 21, (0.8, 0.1, 0.1));
    let mut model = small_model(Variant::Dense, vocab.len(), 16, 1, 4);
    let cfg = TrainConfig {
        epochs: 12,
        peak_lr: 3e-3,
        early_stopping: false,
        record_timings: false,
        ..Default::default()
    };
    let out = train(&mut model, &data, &cfg).unwrap();
    (model, vocab, data, out)
}
