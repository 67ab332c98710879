#![allow(dead_code)]

use mrc_core::corpus::{to_binary_instances, BinaryInstance};
use mrc_core::encoder::{Activation, EncoderConfig};
use mrc_core::synth::{keyword_task, SynthConfig, SynthStyle};
use mrc_core::tokenizer::{build_vocab, Truncation, Vocab};
use mrc_core::trainer::{EncodedCorpus, Model, TrainConfig, Variant};

pub fn keyword_instances(questions: usize, seed: u64, style: SynthStyle, prefix: &str) -> Vec<BinaryInstance> {
    let cfg = SynthConfig {
        questions,
        seed,
        style,
        id_prefix: prefix.into(),
        ..SynthConfig::default()
    };
    keyword_task(&cfg).unwrap().iter().flat_map(to_binary_instances).collect()
}

/// The encoder used by the learnability and transfer experiments.
pub fn small_encoder(seed: u64, max_len: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        n_heads: 4,
        hidden_dim: 16,
        ffn_dim: 32,
        max_len,
        seed,
        activation: Activation::Gelu,
        ..EncoderConfig::default()
    }
}

pub fn encode(instances: &[BinaryInstance], vocab: &Vocab, max_len: usize) -> EncodedCorpus {
    EncodedCorpus::encode(instances, vocab, max_len, Truncation::Head).unwrap()
}

pub fn vocab_of(instances: &[BinaryInstance]) -> Vocab {
    build_vocab(instances, 1, 10_000).unwrap()
}

/// A small binary model and corpus for fast checks.
pub fn tiny_binary(seed: u64, dropout: f64) -> (Model, EncodedCorpus, TrainConfig) {
    let inst = keyword_instances(24, seed, SynthStyle::Exam, "t");
    let vocab = vocab_of(&inst);
    let enc = EncoderConfig {
        hidden_dim: 8,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 16,
        dropout_rate: dropout,
        seed,
        ..EncoderConfig::default()
    };
    let model = Model::new(Variant::Binary, enc, vocab).unwrap();
    let data = encode(&inst, &model.vocab, 16);
    let config = TrainConfig {
        variant: Variant::Binary,
        learning_rate: 1e-2,
        warmup_steps: 5,
        total_steps: 50,
        batch_size: 8,
        seed,
        max_len: 16,
        eval_interval: 1,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    (model, data, config)
}
