//! Shared fixtures for the benches.

use fedsim_core::corpus::{generate_corpus, CorpusConfig};
use fedsim_core::nn::{init_model, Batch, ModelConfig, ModelKind};
use fedsim_core::ParamVector;

pub fn lstm_fixture() -> (ParamVector, Batch) {
    let model = ModelConfig {
        kind: ModelKind::Lstm,
        vocab_size: 200,
        hidden_dim: 64,
        num_blocks: 1,
        seq_len: 16,
        seed: 7,
    };
    let corpus = CorpusConfig {
        vocab_size: 200,
        num_clients: 1,
        sequences_per_client: 32,
        seq_len: 16,
        dirichlet_alpha: 0.5,
        seed: 11,
    };
    let shard = generate_corpus(&corpus).unwrap().remove(0);
    (init_model(&model).unwrap(), shard.batches[0].clone())
}

pub fn transformer_fixture() -> (ParamVector, Batch) {
    let model = ModelConfig {
        kind: ModelKind::Transformer,
        vocab_size: 64,
        hidden_dim: 32,
        num_blocks: 1,
        seq_len: 16,
        seed: 7,
    };
    let corpus = CorpusConfig {
        vocab_size: 64,
        num_clients: 1,
        sequences_per_client: 32,
        seq_len: 16,
        dirichlet_alpha: 0.5,
        seed: 11,
    };
    let shard = generate_corpus(&corpus).unwrap().remove(0);
    (init_model(&model).unwrap(), shard.batches[0].clone())
}
