use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedfms::config::ExperimentConfig;
use fedfms::data::{read_client, write_client, ClientDataset};
use fedfms::experiment::{
    efficiency_table, generate_data, pretrain_checkpoint, run_leave_one_out, Efficiency, FoldResult, Protocol,
};
use fedfms::metrics::{evaluate_client, markdown_grid, score_predictions, MetricsReport, ReportMeta};
use fedfms::model::{MiniSam, ParamRegistry};
use fedfms::wire;
use fedfms::{Error, Result};

use crate::Common;

const MANIFEST: &str = "manifest.json";
const RUN_FILE: &str = "run.json";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    io(path, fs::write(path, contents))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = io(path, fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    client_id: u32,
    name: String,
    file: String,
    samples: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    input_size: usize,
    num_classes: usize,
    clients: Vec<ManifestEntry>,
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = c.resolve(None)?;
    let dir = c.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let spec = cfg.federation_spec();
    let federation = generate_data(&cfg)?;
    io(&dir, fs::create_dir_all(&dir))?;
    let mut clients = Vec::new();
    for (d, profile) in federation.iter().zip(&spec.clients) {
        let file = format!("client-{}.ffmc", d.client_id);
        write_client(&dir.join(&file), d, Some(profile), Some(spec.seed))?;
        println!("client {} ({}): {} samples", d.client_id, d.name, d.n_local());
        clients.push(ManifestEntry {
            client_id: d.client_id,
            name: d.name.clone(),
            file,
            samples: d.n_local(),
        });
    }
    let manifest = Manifest {
        seed: spec.seed,
        input_size: spec.input_size,
        num_classes: spec.num_classes,
        clients,
    };
    write(&dir.join(MANIFEST), json(&manifest))?;
    println!("wrote {}", dir.join(MANIFEST).display());
    Ok(())
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    let dir = &cfg.paths.data_dir;
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.clients.len() != cfg.federation.clients {
        return Err(Error::Data(format!(
            "corpus in {} has {} clients, config expects {}",
            dir.display(),
            manifest.clients.len(),
            cfg.federation.clients
        )));
    }
    if manifest.input_size != cfg.model.input_size || manifest.num_classes != cfg.model.num_classes {
        return Err(Error::Data(format!(
            "corpus in {} is {}px with {} classes, model expects {}px with {}",
            dir.display(),
            manifest.input_size,
            manifest.num_classes,
            cfg.model.input_size,
            cfg.model.num_classes
        )));
    }
    manifest
        .clients
        .iter()
        .map(|e| {
            let (_, d) = read_client(&dir.join(&e.file))?;
            if d.n_local() != e.samples {
                return Err(Error::Data(format!("{}: {} samples, manifest says {}", e.file, d.n_local(), e.samples)));
            }
            Ok(d)
        })
        .collect()
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.data_dir.join("pretrained.ffms"))
}

pub fn pretrain(c: &Common) -> Result<()> {
    let cfg = c.resolve(None)?;
    let path = match &c.out {
        Some(dir) => {
            io(dir, fs::create_dir_all(dir))?;
            dir.join("pretrained.ffms")
        }
        None => {
            let p = checkpoint_path(&cfg);
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                io(dir, fs::create_dir_all(dir))?;
            }
            p
        }
    };
    let params = pretrain_checkpoint(&cfg)?;
    wire::write_file(&path, &params.to_container(false, false))?;
    println!("{} parameters -> {}", params.scalar_count(), path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    report: MetricsReport,
    efficiency: Efficiency,
}

fn fold_checkpoint(dir: &Path, test_client: u32) -> PathBuf {
    dir.join(format!("best-client{test_client}.ffms"))
}

/// Long-format history of every fold.
fn history_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from("test_client,round,download_bytes,upload_bytes,cumulative_bytes,mean_loss,val_dice,val_iou\n");
    for f in folds {
        for r in &f.history.rows {
            let down: u64 = r.traffic.iter().map(|t| t.download_bytes).sum();
            let up: u64 = r.traffic.iter().map(|t| t.upload_bytes).sum();
            let _ = writeln!(
                out,
                "{},{},{down},{up},{},{:.6},{:.6},{:.6}",
                f.test_client, r.round, r.cumulative_bytes, r.mean_loss, r.val.dice, r.val.iou
            );
        }
    }
    out
}

fn timing_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from("test_client,round,seconds\n");
    for f in folds {
        for r in &f.history.rows {
            let _ = writeln!(out, "{},{},{:.4}", f.test_client, r.round, r.seconds);
        }
    }
    out
}

pub fn train(c: &Common, protocol: Protocol) -> Result<()> {
    let cfg = c.resolve(None)?;
    let federation = load_corpus(&cfg)?;
    let pretrained = if cfg.pretrained {
        let path = checkpoint_path(&cfg);
        Some(ParamRegistry::from_container(&wire::read_file(&path)?)?)
    } else {
        None
    };
    let label = cfg.label(protocol == Protocol::Federated);
    let dir = c
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join(format!("{label}-s{}", cfg.federation.seed)));
    io(&dir, fs::create_dir_all(&dir))?;
    write(&dir.join("config.json"), cfg.to_json() + "\n")?;

    let run = run_leave_one_out(&cfg, protocol, &federation, pretrained.as_ref())?;
    for f in &run.folds {
        let best = f.history.best.as_ref().expect("a round ran");
        wire::write_file(&fold_checkpoint(&dir, f.test_client), &best.to_container(false, false))?;
        println!(
            "{label} test client {}: dice {:.4} iou {:.4} (best round {})",
            f.test_client,
            f.test.mean_dice(),
            f.test.mean_iou(),
            f.history.best_round.unwrap_or(0)
        );
    }
    write(&dir.join("history.csv"), history_csv(&run.folds))?;
    write(&dir.join("timing.csv"), timing_csv(&run.folds))?;
    write(&dir.join("metrics.csv"), run.report.to_csv())?;
    write(
        &dir.join("report.md"),
        format!(
            "{}\n{}",
            run.report.to_markdown(),
            efficiency_table(std::slice::from_ref(&run.efficiency))
        ),
    )?;
    write(
        &dir.join(RUN_FILE),
        json(&RunRecord {
            report: run.report.clone(),
            efficiency: run.efficiency,
        }),
    )?;
    println!("{label}: average dice {:.4} -> {}", run.report.grand_dice(), dir.display());
    Ok(())
}

fn oracle_score(d: &ClientDataset, group: bool) -> Result<fedfms::metrics::ClientMetrics> {
    let preds: Vec<_> = d.samples.iter().map(|s| s.mask.clone()).collect();
    score_predictions(&preds, d, group)
}

pub fn eval(c: &Common, run: &Path, oracle: bool) -> Result<()> {
    let cfg = c.resolve(Some(run.join("config.json")))?;
    let federation = load_corpus(&cfg)?;
    let model = MiniSam::new(&cfg.model, cfg.with_adapters())?;
    let record: Option<RunRecord> = read_json(&run.join(RUN_FILE)).ok();
    let tests: Vec<u32> = match cfg.federation.test_client {
        Some(t) => vec![t],
        None => match &record {
            Some(r) => r.report.clients.iter().map(|m| m.client_id).collect(),
            None => federation.iter().map(|d| d.client_id).collect(),
        },
    };
    let group = cfg.data.group_by_volume;
    let mut clients = Vec::new();
    for t in tests {
        let d = federation
            .iter()
            .find(|d| d.client_id == t)
            .ok_or_else(|| Error::Config(format!("no client {t} in the corpus")))?;
        clients.push(if oracle {
            oracle_score(d, group)?
        } else {
            let params = ParamRegistry::from_container(&wire::read_file(&fold_checkpoint(run, t))?)?;
            evaluate_client(&model, &params, d, group)?
        });
    }
    let meta = match (&record, oracle) {
        (_, true) => ReportMeta {
            label: "oracle".into(),
            ..ReportMeta::default()
        },
        (Some(r), false) => r.report.meta.clone(),
        (None, false) => ReportMeta {
            label: cfg.label(true),
            ..ReportMeta::default()
        },
    };
    let report = MetricsReport::new(meta, clients)?;
    let dir = c.out.clone().unwrap_or_else(|| run.to_owned());
    io(&dir, fs::create_dir_all(&dir))?;
    write(&dir.join("eval-metrics.csv"), report.to_csv())?;
    write(&dir.join("eval-metrics.md"), report.to_markdown())?;
    print!("{}", report.to_markdown());
    Ok(())
}

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let records = runs
        .iter()
        .map(|r| read_json::<RunRecord>(&r.join(RUN_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = records.iter().map(|r| r.report.clone()).collect();
    let efficiency: Vec<Efficiency> = records.iter().map(|r| r.efficiency.clone()).collect();
    let md = format!(
        "## Segmentation on unseen clients\n\n{}\n## Efficiency\n\n{}",
        markdown_grid(&reports),
        efficiency_table(&efficiency)
    );
    let mut csv = String::from(MetricsReport::csv_header());
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    if let Some(dir) = out {
        io(dir, fs::create_dir_all(dir))?;
        write(&dir.join("report.md"), &md)?;
        write(&dir.join("metrics.csv"), &csv)?;
    }
    print!("{md}");
    Ok(())
}
