//! Pseudo-pretraining: the adapter-free model trained from random init on a
//! generic pooled corpus, standing in for large-scale pretrained weights.

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{build_model, set_train_mode, ModelConfig, ParamRegistry, TrainMode};
use crate::seed::derive_seed;
use crate::trainer::{LocalTrainer, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Size of the generated pretraining corpus.
    pub corpus_size: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Fixed independently of the experiment seed, like a released checkpoint.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 480,
            epochs: 6,
            lr: 1e-3,
            batch_size: 6,
            seed: 7,
        }
    }
}

/// Trains the adapter-free model on `corpus` and returns its parameters,
/// all flagged trainable. Zero epochs return the random init for `seed`.
pub fn pseudo_pretrain(
    cfg: &ModelConfig,
    corpus: &ClientDataset,
    epochs: usize,
    seed: u64,
    trainer: TrainerConfig,
) -> Result<ParamRegistry> {
    if corpus.samples.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let (mut params, model) = build_model(cfg, false, seed)?;
    set_train_mode(&mut params, TrainMode::FullFineTune)?;
    let cfg = TrainerConfig {
        local_epochs: 1,
        ..trainer
    };
    let mut t = LocalTrainer::new(u32::MAX, cfg, derive_seed(seed, 0xFEED));
    for epoch in 0..epochs {
        t.train(&model, &mut params, corpus, epoch as u32)?;
    }
    Ok(params)
}
