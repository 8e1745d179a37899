//! Small models and configs shared by the integration tests.

use ade_core::cli::{AdeTemplate, ArmConfig, CorpusSource, ExperimentConfig, TaskConfig};
use ade_core::data::Generator;
use ade_core::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model_config(n_blocks: usize) -> ModelConfig {
    ModelConfig {
        n_blocks,
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        vocab_size: 20,
        max_seq_len: 12,
        ..ModelConfig::default()
    }
}

pub fn model(n_blocks: usize, seed: u64) -> Model {
    Model::init(model_config(n_blocks), seed).unwrap()
}

/// Random token sequences with lengths in `2..=max_len`.
pub fn random_sequences(rng: &mut ChaCha8Rng, n: usize, max_len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seconds-scale experiment: 4 blocks, 40 pretraining steps and 20 steps
/// per continued-pretraining arm.
pub fn micro_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::tiny();
    cfg.seed = seed;
    cfg.model = ModelConfig {
        n_blocks: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 34,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    cfg.data.general = CorpusSource::generated("general", Generator::MarkovText, 120, 48);
    cfg.data.target = CorpusSource::generated("target", Generator::Arithmetic, 120, 48);
    cfg.data.tasks = TaskConfig {
        per_corpus: 8,
        context_len: 8,
        option_len: 4,
    };
    for t in [&mut cfg.pretrain, &mut cfg.train] {
        t.seq_len = 17;
        t.tokens_per_batch = 17 * 4;
    }
    cfg.pretrain.total_tokens = 17 * 4 * 40;
    cfg.train.total_tokens = 17 * 4 * 20;
    cfg.arm = ArmConfig::Ade(AdeTemplate::default());
    cfg.reproduce.lora.rank = 2;
    cfg.reproduce.lora.alpha = 4.0;
    cfg.validate().unwrap();
    cfg
}

pub fn with_arm(cfg: &ExperimentConfig, arm: ArmConfig) -> ExperimentConfig {
    ExperimentConfig { arm, ..cfg.clone() }
}
