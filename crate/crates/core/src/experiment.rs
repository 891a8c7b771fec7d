//! End-to-end runs: data, (pseudo-)pretrained initialization, leave-one-
//! client-out federated or centralized training, and evaluation.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_federation, partition_leave_one_out, pretraining_corpus, ClientDataset};
use crate::error::{Error, Result};
use crate::fed::{pool_datasets, run_training, train_centralized, CommLedger, EvalScore, FedClient, GlobalState, History};
use crate::flops::estimate_flops;
use crate::metrics::{evaluate_client, ClientMetrics, MetricsReport, ReportMeta};
use crate::model::{build_model, set_train_mode, MiniSam, ParamRegistry, TrainMode};
use crate::pretrain::pseudo_pretrain;
use crate::seed::derive_seed;
use crate::trainer::TrainerConfig;

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Federated,
    Centralized,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Federated => "fed",
            Protocol::Centralized => "central",
        }
    }
}

/// The synthetic federation described by `cfg`.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    generate_federation(&cfg.federation_spec(), cfg.data.n_per_client)
}

/// Pseudo-pretrained, adapter-free parameters for `cfg.model`.
pub fn pretrain_checkpoint(cfg: &ExperimentConfig) -> Result<ParamRegistry> {
    let p = &cfg.pretrain;
    let corpus = pretraining_corpus(cfg.model.input_size, cfg.model.num_classes, p.corpus_size, p.seed)?;
    let trainer = TrainerConfig {
        lr: p.lr,
        batch_size: p.batch_size,
        ..cfg.trainer
    };
    pseudo_pretrain(&cfg.model, &corpus, p.epochs, p.seed, trainer)
}

/// Model and starting parameters: random for the seed, with the shared
/// weights overwritten by `pretrained` when given.
pub fn initial_params(cfg: &ExperimentConfig, pretrained: Option<&ParamRegistry>) -> Result<(ParamRegistry, MiniSam)> {
    let (mut params, model) = build_model(
        &cfg.model,
        cfg.with_adapters(),
        derive_seed(cfg.federation.seed, INIT_STREAM),
    )?;
    match (cfg.pretrained, pretrained) {
        (true, Some(ckpt)) => params.load_shared(ckpt)?,
        (true, None) => return Err(Error::Config("pretrained run without a pretrained checkpoint".into())),
        (false, _) => {}
    }
    Ok((params, model))
}

/// Outcome of training with one client held out.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub test_client: u32,
    pub history: History,
    /// Test metrics of the best-validation checkpoint.
    pub test: ClientMetrics,
    pub ledger: Option<CommLedger>,
    pub n_trainable: usize,
    /// Training samples processed per round (or epoch).
    pub samples_per_round: usize,
}

impl FoldResult {
    pub fn mean_round_seconds(&self) -> f64 {
        self.history.rows.iter().map(|r| r.seconds).sum::<f64>() / self.history.rows.len().max(1) as f64
    }
}

fn validation_scorer<'a>(
    model: &'a MiniSam,
    val: &'a ClientDataset,
    group_by_volume: bool,
) -> impl FnMut(&ParamRegistry) -> Result<EvalScore> + 'a {
    move |params| {
        let m = evaluate_client(model, params, val, group_by_volume)?;
        Ok(EvalScore {
            dice: m.mean_dice(),
            iou: m.mean_iou(),
        })
    }
}

/// Builds the worker pool requested by the config, if any.
pub fn thread_pool(cfg: &ExperimentConfig) -> Result<Option<rayon::ThreadPool>> {
    cfg.federation
        .threads
        .map(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a pool of {n} threads: {e}")))
        })
        .transpose()
}

/// Trains from `init` with `test_client` held out and scores the
/// best-validation checkpoint on it.
pub fn run_fold(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    federation: &[ClientDataset],
    test_client: u32,
    init: &ParamRegistry,
    model: &MiniSam,
    pool: Option<&rayon::ThreadPool>,
) -> Result<FoldResult> {
    cfg.validate()?;
    let seed = cfg.federation.seed;
    let split = partition_leave_one_out(federation, test_client, cfg.data.val_ratio, seed)?;
    let val = pool_datasets(&split.val)?;
    let eval = validation_scorer(model, &val, cfg.data.group_by_volume);
    let samples_per_round = split.train.iter().map(ClientDataset::n_local).sum();
    let rounds = cfg.federation.rounds;
    let (history, ledger, n_trainable) = match protocol {
        Protocol::Federated => {
            let mut state = GlobalState::new(init.clone(), cfg.mode)?;
            let mut clients: Vec<FedClient> =
                split.train.into_iter().map(|d| FedClient::new(d, cfg.trainer, seed)).collect();
            let h = run_training(&mut state, &mut clients, model, rounds, pool, eval)?;
            let n = state.ledger.n_trainable;
            (h, Some(state.ledger), n)
        }
        Protocol::Centralized => {
            let pooled = pool_datasets(&split.train)?;
            let mut params = init.clone();
            let n = set_train_mode(&mut params, cfg.mode)?;
            let run = || train_centralized(model, &mut params, cfg.mode, &pooled, rounds, cfg.trainer, seed, eval);
            let h = match pool {
                Some(p) => p.install(run),
                None => run(),
            }?;
            (h, None, n)
        }
    };
    let best = history.best.as_ref().expect("at least one round ran");
    let test = evaluate_client(model, best, &split.test, cfg.data.group_by_volume)?;
    Ok(FoldResult {
        test_client,
        history,
        test,
        ledger,
        n_trainable,
        samples_per_round,
    })
}

/// Leave-one-client-out over every client (or the configured one).
#[derive(Clone, Debug)]
pub struct RunResult {
    pub report: MetricsReport,
    pub folds: Vec<FoldResult>,
    pub efficiency: Efficiency,
}

pub fn run_leave_one_out(
    cfg: &ExperimentConfig,
    protocol: Protocol,
    federation: &[ClientDataset],
    pretrained: Option<&ParamRegistry>,
) -> Result<RunResult> {
    cfg.validate()?;
    let pool = thread_pool(cfg)?;
    let (init, model) = initial_params(cfg, pretrained)?;
    let tests: Vec<u32> = match cfg.federation.test_client {
        Some(t) => vec![t],
        None => federation.iter().map(|c| c.client_id).collect(),
    };
    let folds = tests
        .iter()
        .map(|&t| run_fold(cfg, protocol, federation, t, &init, &model, pool.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let meta = ReportMeta {
        label: cfg.label(protocol == Protocol::Federated),
        protocol: protocol.name().into(),
        mode: cfg.mode.short_name().into(),
        variant: cfg.model.variant.name().into(),
        pretrained: cfg.pretrained,
        seed: cfg.federation.seed,
    };
    let report = MetricsReport::new(meta, folds.iter().map(|f| f.test.clone()).collect())?;
    let efficiency = Efficiency::measure(cfg, &folds);
    Ok(RunResult {
        report,
        folds,
        efficiency,
    })
}

/// Efficiency figures of a run, as in a parameters/time/FLOPs/traffic table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub label: String,
    pub mode: TrainMode,
    pub learnable_params: usize,
    pub seconds_per_round: f64,
    pub flops_per_sample: u64,
    pub flops_per_round: u64,
    /// Mean trainable traffic per round over all clients (federated only).
    pub bytes_per_round: u64,
}

impl Efficiency {
    pub fn measure(cfg: &ExperimentConfig, folds: &[FoldResult]) -> Self {
        let flops = estimate_flops(&cfg.model, cfg.with_adapters(), cfg.mode).total();
        let n = folds.len().max(1) as f64;
        let samples = folds.iter().map(|f| f.samples_per_round).sum::<usize>() as f64 / n;
        let bytes = folds
            .iter()
            .filter_map(|f| f.ledger.as_ref())
            .map(|l| l.cumulative_bytes() as f64 / l.rounds.len().max(1) as f64)
            .sum::<f64>()
            / n;
        Self {
            label: cfg.label(folds.iter().any(|f| f.ledger.is_some())),
            mode: cfg.mode,
            learnable_params: folds.first().map_or(0, |f| f.n_trainable),
            seconds_per_round: folds.iter().map(FoldResult::mean_round_seconds).sum::<f64>() / n,
            flops_per_sample: flops,
            flops_per_round: (flops as f64 * samples).round() as u64,
            bytes_per_round: bytes.round() as u64,
        }
    }
}

/// Markdown efficiency table with one row per run.
pub fn efficiency_table(rows: &[Efficiency]) -> String {
    let mut out = String::from(
        "| Method | Learnable params | Time / round (s) | FLOPs / sample | FLOPs / round | Bytes / round |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.3} | {:.3e} | {:.3e} | {} |\n",
            r.label, r.learnable_params, r.seconds_per_round, r.flops_per_sample as f64, r.flops_per_round as f64, r.bytes_per_round
        ));
    }
    out
}
