//! Client-side optimisation: Adam over the trainable subset and mini-batch
//! epochs of per-class BCE.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{set_train_mode, MiniSam, ParamRegistry, TrainMode};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::wire::{ParamContainer, FLAG_SUBSET, FLAG_UPDATE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Start every round with zero moments instead of keeping them.
    pub reset_optimizer: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 6,
            local_epochs: 1,
            reset_optimizer: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: IndexMap<String, Tensor<f32>>,
    v: IndexMap<String, Tensor<f32>>,
}

impl AdamState {
    /// Zero moments for the currently trainable parameters.
    pub fn new(params: &ParamRegistry, cfg: &TrainerConfig) -> Self {
        let zeros: IndexMap<String, Tensor<f32>> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.to_owned(), Tensor::zeros(p.tensor.shape().to_vec())))
            .collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            v: zeros.clone(),
            m: zeros,
        }
    }

    /// Number of optimizer steps taken.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<f32>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<f32>> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(params: &mut ParamRegistry, grads: &Gradients<f32>, state: &mut AdamState) -> Result<()> {
    let trainable = params.trainable_names();
    if trainable.len() != state.m.len() || trainable.iter().any(|n| !state.m.contains_key(n)) {
        return Err(Error::State("optimizer state does not match the trainable set".into()));
    }
    for name in &trainable {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::State(format!("missing gradient for trainable parameter {name:?}")))?;
        if g.shape() != state.m[name].shape() {
            return Err(Error::State(format!("gradient shape mismatch for {name:?}")));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !state.m.contains_key(*k)) {
        return Err(Error::State(format!("gradient for non-trainable parameter {extra:?}")));
    }

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - (b1 as f64).powi(t);
    let c2 = 1.0 - (b2 as f64).powi(t);
    // lr * mhat / (sqrt(vhat) + eps) with the bias corrections folded in
    let step = (state.lr as f64 / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    for name in &trainable {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        let p = params.value_mut(name).expect("trainable name is registered").data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= step * m[i] / (v[i].sqrt() / c2_sqrt + state.eps);
        }
    }
    Ok(())
}

/// One client's trainable values after a round, plus its FedAvg weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub round: u32,
    pub values: IndexMap<String, Tensor<f32>>,
    pub n_local: usize,
}

impl ClientUpdate {
    /// Wire payload of the update. Client id, round and sample count travel
    /// in the envelope around it, not in the container.
    pub fn to_container(&self, params: &ParamRegistry) -> Result<ParamContainer> {
        let mut c = ParamContainer::new(FLAG_UPDATE | FLAG_SUBSET);
        for (name, t) in &self.values {
            let role = params
                .get(name)
                .ok_or_else(|| Error::Protocol(format!("update names unknown parameter {name:?}")))?
                .role;
            c.push(name.clone(), role, t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &ParamContainer, client_id: u32, round: u32, n_local: usize) -> Self {
        Self {
            client_id,
            round,
            values: c.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect(),
            n_local,
        }
    }
}

/// Mean loss and batch-averaged gradients over `batch`, one tape per sample.
pub fn batch_gradients(
    model: &MiniSam,
    params: &ParamRegistry,
    data: &ClientDataset,
    batch: &[usize],
) -> Result<(f64, Gradients<f32>)> {
    let per_sample = batch
        .par_iter()
        .map(|&i| -> Result<(f32, Gradients<f32>)> {
            let s = &data.samples[i];
            let mut tape = Tape::<f32>::new();
            params.record(&mut tape)?;
            let loss = model.loss_on_tape(&mut tape, &s.image, &s.mask)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    // fixed reduction order keeps the result independent of scheduling
    let mut iter = per_sample.into_iter();
    let (l0, mut acc) = iter.next().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut loss = l0 as f64;
    for (l, g) in iter {
        loss += l as f64;
        for (name, t) in g {
            let dst = acc
                .get_mut(&name)
                .ok_or_else(|| Error::State(format!("gradient set differs across samples at {name:?}")))?;
            for (a, b) in dst.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    for t in acc.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss / batch.len() as f64, acc))
}

/// A client's persistent training state: Adam moments and epoch counter
/// survive across rounds so that one long-lived trainer on one client is
/// the same computation as serial local training.
#[derive(Clone, Debug)]
pub struct LocalTrainer {
    pub client_id: u32,
    pub cfg: TrainerConfig,
    seed: u64,
    epoch: u64,
    adam: Option<AdamState>,
    losses: Vec<f64>,
}

impl LocalTrainer {
    pub fn new(client_id: u32, cfg: TrainerConfig, seed: u64) -> Self {
        Self {
            client_id,
            cfg,
            seed,
            epoch: 0,
            adam: None,
            losses: Vec::new(),
        }
    }

    /// Mean loss of every batch trained so far, in order.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn optimizer(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    /// Trains `params` in place for `cfg.local_epochs` epochs on `data` and
    /// returns the trainable values.
    pub fn train(
        &mut self,
        model: &MiniSam,
        params: &mut ParamRegistry,
        data: &ClientDataset,
        round: u32,
    ) -> Result<ClientUpdate> {
        self.cfg.validate()?;
        if data.samples.is_empty() {
            return Err(Error::Data(format!("client {} has no training data", self.client_id)));
        }
        if self.cfg.reset_optimizer || self.adam.is_none() {
            self.adam = Some(AdamState::new(params, &self.cfg));
        }
        let adam = self.adam.as_mut().expect("initialised above");
        for _ in 0..self.cfg.local_epochs {
            let mut order: Vec<usize> = (0..data.n_local()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.epoch)));
            for batch in order.chunks(self.cfg.batch_size) {
                let (loss, grads) = batch_gradients(model, params, data, batch)?;
                adam_step(params, &grads, adam)?;
                self.losses.push(loss);
            }
            self.epoch += 1;
        }
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            values: params.trainable_values(),
            n_local: data.n_local(),
        })
    }
}

/// Sets `mode` on `params` and runs `epochs` epochs with a fresh trainer.
pub fn train_local(
    model: &MiniSam,
    params: &mut ParamRegistry,
    mode: TrainMode,
    data: &ClientDataset,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    set_train_mode(params, mode)?;
    let cfg = TrainerConfig {
        local_epochs: epochs,
        batch_size,
        ..TrainerConfig::default()
    };
    LocalTrainer::new(data.client_id, cfg, seed).train(model, params, data, 0)
}
