//! Synchronous FedAvg rounds with byte-exact communication accounting.

use std::fmt::Write as _;
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{set_train_mode, MiniSam, ParamRegistry, TrainMode};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{ClientUpdate, LocalTrainer, TrainerConfig};
use crate::wire::{deserialize, serialize, ParamContainer};

/// Weighted mean of client updates with weights `N_k / ΣN`.
///
/// Weights are formed in f64 before any accumulation, so scaling every
/// `N_k` by the same factor gives bit-identical output and a single client
/// is reproduced exactly.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<IndexMap<String, Tensor<f32>>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("fedavg needs at least one update".into()))?;
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    for u in &order {
        if u.round != first.round {
            return Err(Error::Protocol(format!(
                "client {} sent an update for round {}, expected {}",
                u.client_id, u.round, first.round
            )));
        }
        if u.values.len() != first.values.len() {
            return Err(Error::Protocol(format!("client {} sent a different key set", u.client_id)));
        }
        for (name, t) in &first.values {
            match u.values.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(_) => return Err(Error::Protocol(format!("client {} sent {name:?} with another shape", u.client_id))),
                None => return Err(Error::Protocol(format!("client {} is missing {name:?}", u.client_id))),
            }
        }
    }
    let total: u64 = order.iter().map(|u| u.n_local as u64).sum();
    if total == 0 {
        return Err(Error::Protocol("total sample count is zero".into()));
    }
    let weights: Vec<f64> = order.iter().map(|u| u.n_local as f64 / total as f64).collect();
    let mut out = IndexMap::with_capacity(first.values.len());
    for (name, t) in &first.values {
        let mut acc = vec![0.0f64; t.len()];
        for (u, &w) in order.iter().zip(&weights) {
            for (a, &v) in acc.iter_mut().zip(u.values[name].data()) {
                *a += w * v as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub client_id: u32,
    pub download_bytes: u64,
    pub upload_bytes: u64,
    pub download_scalars: u64,
    pub upload_scalars: u64,
}

impl Traffic {
    pub fn bytes(&self) -> u64 {
        self.download_bytes + self.upload_bytes
    }

    pub fn scalars(&self) -> u64 {
        self.download_scalars + self.upload_scalars
    }
}

/// Bytes actually serialized between server and clients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    /// Trainable scalar count n of the active mode.
    pub n_trainable: usize,
    /// One-off distribution of the frozen parameters before round 1.
    pub initial: Vec<Traffic>,
    /// Per round, per client trainable-subset traffic.
    pub rounds: Vec<Vec<Traffic>>,
}

impl CommLedger {
    pub fn round_bytes(&self, round: usize) -> u64 {
        self.rounds.get(round).map_or(0, |r| r.iter().map(Traffic::bytes).sum())
    }

    /// Trainable traffic over all rounds, excluding the initial broadcast.
    pub fn cumulative_bytes(&self) -> u64 {
        self.rounds.iter().flatten().map(Traffic::bytes).sum()
    }

    pub fn initial_bytes(&self) -> u64 {
        self.initial.iter().map(Traffic::bytes).sum()
    }
}

/// Server-side state between rounds.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub round: u32,
    pub params: ParamRegistry,
    pub mode: TrainMode,
    pub ledger: CommLedger,
}

impl GlobalState {
    pub fn new(mut params: ParamRegistry, mode: TrainMode) -> Result<Self> {
        let n = set_train_mode(&mut params, mode)?;
        Ok(Self {
            round: 0,
            params,
            mode,
            ledger: CommLedger {
                n_trainable: n,
                ..CommLedger::default()
            },
        })
    }
}

/// A simulated client: its data, trainer and local copy of the model,
/// assembled from what the server has sent it.
#[derive(Clone, Debug)]
pub struct FedClient {
    pub data: ClientDataset,
    pub trainer: LocalTrainer,
    local: Option<ParamRegistry>,
}

impl FedClient {
    /// Trainer seed is derived from the experiment seed and the client id.
    pub fn new(data: ClientDataset, cfg: TrainerConfig, seed: u64) -> Self {
        let trainer = LocalTrainer::new(data.client_id, cfg, derive_seed(seed, data.client_id as u64));
        Self {
            data,
            trainer,
            local: None,
        }
    }

    pub fn client_id(&self) -> u32 {
        self.data.client_id
    }

    pub fn local_params(&self) -> Option<&ParamRegistry> {
        self.local.as_ref()
    }

    fn receive_initial(&mut self, bytes: &[u8]) -> Result<()> {
        self.local = Some(ParamRegistry::from_container(&deserialize(bytes)?)?);
        Ok(())
    }

    fn receive_round(&mut self, bytes: &[u8], mode: TrainMode) -> Result<()> {
        let c = deserialize(bytes)?;
        let local = self
            .local
            .as_mut()
            .ok_or_else(|| Error::Protocol("round payload before the initial broadcast".into()))?;
        let fresh = c.entries.iter().any(|e| local.get(&e.name).is_none());
        for e in &c.entries {
            if local.get(&e.name).is_none() {
                local.insert(e.name.clone(), e.tensor.clone(), e.role)?;
            }
        }
        local.apply_container(&c)?;
        if fresh {
            set_train_mode(local, mode)?;
        }
        Ok(())
    }

    fn train_round(&mut self, model: &MiniSam, round: u32) -> Result<Vec<u8>> {
        let local = self.local.as_mut().expect("received before training");
        let update = self.trainer.train(model, local, &self.data, round)?;
        Ok(serialize(&update.to_container(local)?)?)
    }
}

fn traffic(client_id: u32, down: &[u8], up: &[u8], down_c: &ParamContainer, up_c: &ParamContainer) -> Traffic {
    Traffic {
        client_id,
        download_bytes: down.len() as u64,
        upload_bytes: up.len() as u64,
        download_scalars: down_c.scalar_count() as u64,
        upload_scalars: up_c.scalar_count() as u64,
    }
}

fn in_pool<R: Send>(pool: Option<&rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Runs one distribute → train → collect → aggregate cycle. On any client
/// failure the global state is left untouched.
pub fn run_round(
    state: &mut GlobalState,
    clients: &mut [FedClient],
    model: &MiniSam,
    pool: Option<&rayon::ThreadPool>,
) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("a round needs at least one client".into()));
    }
    let round = state.round;
    if clients.iter().any(|c| c.local.is_none()) {
        // frozen weights travel once; trainable ones go out every round
        let frozen = frozen_container(&state.params);
        let bytes = serialize(&frozen)?;
        let empty = ParamContainer::default();
        state.ledger.initial = clients
            .iter_mut()
            .map(|c| {
                c.receive_initial(&bytes)?;
                Ok(traffic(c.client_id(), &bytes, &[], &frozen, &empty))
            })
            .collect::<Result<_>>()?;
    }
    let down_c = state.params.to_container(true, false);
    let down = serialize(&down_c)?;
    let mode = state.mode;
    let results: Vec<Result<Vec<u8>>> = in_pool(pool, || {
        clients
            .par_iter_mut()
            .map(|c| {
                c.receive_round(&down, mode)?;
                c.train_round(model, round)
            })
            .collect()
    });
    let mut updates = Vec::with_capacity(clients.len());
    let mut log = Vec::with_capacity(clients.len());
    for (c, r) in clients.iter().zip(results) {
        let abort = |e: Error| Error::Round {
            round,
            client: c.client_id(),
            source: Box::new(e),
        };
        let up = r.map_err(abort)?;
        let up_c = deserialize(&up).map_err(|e| abort(e.into()))?;
        log.push(traffic(c.client_id(), &down, &up, &down_c, &up_c));
        updates.push(ClientUpdate::from_container(&up_c, c.client_id(), round, c.data.n_local()));
    }
    let merged = fedavg(&updates)?;
    for (name, t) in merged {
        state.params.set_value(&name, t)?;
    }
    state.ledger.rounds.push(log);
    state.round += 1;
    Ok(())
}

fn frozen_container(params: &ParamRegistry) -> ParamContainer {
    let mut c = ParamContainer::default();
    for (name, p) in params.iter() {
        if !p.trainable {
            c.push(name, p.role, p.tensor.clone());
        }
    }
    c
}

/// Validation metrics after a round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub round: u32,
    /// (client, bytes down, bytes up) for federated rows; empty otherwise.
    pub traffic: Vec<Traffic>,
    pub cumulative_bytes: u64,
    pub mean_loss: f64,
    pub val: EvalScore,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Highest validation Dice seen, earliest on ties.
    pub best_round: Option<u32>,
    pub best: Option<ParamRegistry>,
}

impl History {
    fn push(&mut self, row: HistoryRow, params: &ParamRegistry) {
        let better = match self.best_round {
            None => true,
            Some(r) => row.val.dice > self.rows[r as usize - 1].val.dice,
        };
        if better {
            self.best_round = Some(row.round);
            self.best = Some(params.clone());
        }
        self.rows.push(row);
    }

    pub fn best_dice(&self) -> Option<f64> {
        self.best_round.map(|r| self.rows[r as usize - 1].val.dice)
    }

    /// One line per round. Federated runs get a bytes column per client.
    pub fn to_csv(&self) -> String {
        let clients: Vec<u32> = self
            .rows
            .first()
            .map(|r| r.traffic.iter().map(|t| t.client_id).collect())
            .unwrap_or_default();
        let mut out = String::from("round");
        for c in &clients {
            let _ = write!(out, ",client{c}_bytes");
        }
        out.push_str(",cumulative_bytes,mean_loss,val_dice,val_iou\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.round);
            for t in &r.traffic {
                let _ = write!(out, ",{}", t.bytes());
            }
            let _ = writeln!(
                out,
                ",{},{:.6},{:.6},{:.6}",
                r.cumulative_bytes, r.mean_loss, r.val.dice, r.val.iou
            );
        }
        out
    }

    /// Wall-clock per round, kept apart from `to_csv` so that file stays
    /// reproducible byte for byte.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("round,seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4}", r.round, r.seconds);
        }
        out
    }
}

fn mean_tail(losses: &[f64], from: usize) -> f64 {
    let tail = &losses[from.min(losses.len())..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Runs `rounds` rounds, scoring the global model with `eval` after each.
pub fn run_training(
    state: &mut GlobalState,
    clients: &mut [FedClient],
    model: &MiniSam,
    rounds: u32,
    pool: Option<&rayon::ThreadPool>,
    mut eval: impl FnMut(&ParamRegistry) -> Result<EvalScore>,
) -> Result<History> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let mut history = History::default();
    for _ in 0..rounds {
        let before: Vec<usize> = clients.iter().map(|c| c.trainer.losses().len()).collect();
        let start = Instant::now();
        run_round(state, clients, model, pool)?;
        let seconds = start.elapsed().as_secs_f64();
        let losses: Vec<f64> = clients
            .iter()
            .zip(&before)
            .map(|(c, &b)| mean_tail(c.trainer.losses(), b))
            .collect();
        let row = HistoryRow {
            round: state.round,
            traffic: state.ledger.rounds.last().cloned().unwrap_or_default(),
            cumulative_bytes: state.ledger.cumulative_bytes(),
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val: eval(&state.params)?,
            seconds,
        };
        history.push(row, &state.params);
    }
    Ok(history)
}

/// Plain training on pooled data, one epoch per "round", as the
/// comparison arm. With one client and the same seed it performs exactly
/// the computation of federated training.
pub fn train_centralized(
    model: &MiniSam,
    params: &mut ParamRegistry,
    mode: TrainMode,
    pooled: &ClientDataset,
    epochs: u32,
    cfg: TrainerConfig,
    seed: u64,
    mut eval: impl FnMut(&ParamRegistry) -> Result<EvalScore>,
) -> Result<History> {
    set_train_mode(params, mode)?;
    let mut trainer = LocalTrainer::new(pooled.client_id, cfg, derive_seed(seed, pooled.client_id as u64));
    let mut history = History::default();
    for epoch in 0..epochs {
        let before = trainer.losses().len();
        let start = Instant::now();
        trainer.train(model, params, pooled, epoch)?;
        let row = HistoryRow {
            round: epoch + 1,
            traffic: Vec::new(),
            cumulative_bytes: 0,
            mean_loss: mean_tail(trainer.losses(), before),
            val: eval(params)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        history.push(row, params);
    }
    Ok(history)
}

/// Union of datasets as one pooled client with id 0.
pub fn pool_datasets(parts: &[ClientDataset]) -> Result<ClientDataset> {
    let samples = parts.iter().flat_map(|c| c.samples.iter().cloned()).collect();
    ClientDataset::new(0, "pooled", samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn update(client_id: u32, n: usize, values: &[(&str, Vec<f32>)]) -> ClientUpdate {
        ClientUpdate {
            client_id,
            round: 0,
            values: values
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
                .collect(),
            n_local: n,
        }
    }

    #[test]
    fn hand_arithmetic() {
        let out = fedavg(&[update(0, 1, &[("w", vec![0.0])]), update(1, 3, &[("w", vec![4.0])])]).unwrap();
        assert_eq!(out["w"].data(), &[3.0]);
    }

    #[test]
    fn single_client_is_exact() {
        let u = update(2, 7, &[("a", vec![0.1, -3.3e-7, 1e20]), ("b", vec![0.7])]);
        let out = fedavg(std::slice::from_ref(&u)).unwrap();
        for (k, t) in &u.values {
            assert!(out[k].bit_eq(t));
        }
    }

    #[test]
    fn protocol_errors() {
        let a = update(0, 1, &[("w", vec![1.0])]);
        let b = update(1, 1, &[("v", vec![1.0])]);
        assert!(matches!(fedavg(&[a.clone(), b]), Err(Error::Protocol(_))));
        let z = update(1, 0, &[("w", vec![1.0])]);
        let z0 = update(0, 0, &[("w", vec![1.0])]);
        assert!(matches!(fedavg(&[z0, z]), Err(Error::Protocol(_))));
        let mut late = update(1, 1, &[("w", vec![1.0])]);
        late.round = 3;
        assert!(matches!(fedavg(&[a, late]), Err(Error::Protocol(_))));
        assert!(matches!(fedavg(&[]), Err(Error::Protocol(_))));
    }

    fn random_updates() -> impl Strategy<Value = Vec<ClientUpdate>> {
        (1usize..7, 1usize..12).prop_flat_map(|(k, len)| {
            prop::collection::vec((1usize..1000, prop::collection::vec(-100.0f32..100.0, len)), k).prop_map(
                |clients| {
                    clients
                        .into_iter()
                        .enumerate()
                        .map(|(i, (n, v))| update(i as u32, n, &[("p", v)]))
                        .collect::<Vec<_>>()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn convex_combination(updates in random_updates()) {
            let out = fedavg(&updates).unwrap();
            for (i, &v) in out["p"].data().iter().enumerate() {
                let vals = updates.iter().map(|u| u.values["p"].data()[i]);
                let lo = vals.clone().fold(f32::INFINITY, f32::min);
                let hi = vals.fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(lo <= v && v <= hi);
            }
        }

        #[test]
        fn weight_scale_invariance(updates in random_updates(), c in 1usize..50) {
            let scaled: Vec<_> = updates.iter().cloned().map(|mut u| { u.n_local *= c; u }).collect();
            prop_assert!(fedavg(&updates).unwrap()["p"].bit_eq(&fedavg(&scaled).unwrap()["p"]));
        }

        #[test]
        fn client_order_is_irrelevant(updates in random_updates()) {
            let mut rev = updates.clone();
            rev.reverse();
            prop_assert!(fedavg(&updates).unwrap()["p"].bit_eq(&fedavg(&rev).unwrap()["p"]));
        }
    }
}
