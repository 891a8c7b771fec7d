//! Dice/IoU, per-client evaluation reports and the paired t-test used to
//! compare federated against centralized training.
//!
//! Both-empty convention: when prediction and ground truth are both empty,
//! Dice and IoU are 1.0 (a correct empty prediction).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{MiniSam, ParamRegistry};
use crate::tensor::Tensor;

/// Pixel counts for one mask pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl Overlap {
    pub fn union(&self) -> u64 {
        self.pred + self.gt - self.intersection
    }

    pub fn dice(&self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
        }
    }

    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.intersection as f64 / u as f64,
        }
    }
}

impl std::ops::AddAssign for Overlap {
    fn add_assign(&mut self, o: Self) {
        self.intersection += o.intersection;
        self.pred += o.pred;
        self.gt += o.gt;
    }
}

fn overlap_slices(pred: &[f32], gt: &[f32]) -> Overlap {
    let mut o = Overlap::default();
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p > 0.5, g > 0.5);
        o.pred += p as u64;
        o.gt += g as u64;
        o.intersection += (p && g) as u64;
    }
    o
}

pub fn overlap(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Overlap> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(overlap_slices(pred.data(), gt.data()))
}

/// `2|P∩G| / (|P| + |G|)` over binary masks.
pub fn dice(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    Ok(overlap(pred, gt)?.dice())
}

/// `|P∩G| / |P∪G|` over binary masks.
pub fn iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    Ok(overlap(pred, gt)?.iou())
}

/// 1.0 where `logit > 0` (sigmoid strictly above one half), else 0.0.
pub fn binarize(logits: &Tensor<f32>) -> Tensor<f32> {
    Tensor::from_fn(logits.shape().to_vec(), |i| if logits.data()[i] > 0.0 { 1.0 } else { 0.0 })
}

/// Per-class overlaps of an `[h × w × c]` prediction against its mask.
fn class_overlaps(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<Overlap>> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(Error::dim(format!(
            "prediction {:?} does not match mask {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let c = pred.last_dim();
    let mut out = vec![Overlap::default(); c];
    for (p, g) in pred.data().chunks_exact(c).zip(gt.data().chunks_exact(c)) {
        for k in 0..c {
            let o = &mut out[k];
            let (pk, gk) = (p[k] > 0.5, g[k] > 0.5);
            o.pred += pk as u64;
            o.gt += gk as u64;
            o.intersection += (pk && gk) as u64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: u32,
    pub name: String,
    /// Per class, averaged over evaluation units (slices or volumes).
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    /// Number of samples, or of volumes when grouped.
    pub units: usize,
}

impl ClientMetrics {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }

    pub fn mean_iou(&self) -> f64 {
        self.iou.iter().sum::<f64>() / self.iou.len() as f64
    }
}

/// Scores binary predictions (one per sample, in dataset order). With
/// `group_by_volume`, pixel counts of slices sharing a volume are pooled
/// before Dice/IoU is taken; samples without a volume stand alone.
pub fn score_predictions(preds: &[Tensor<f32>], dataset: &ClientDataset, group_by_volume: bool) -> Result<ClientMetrics> {
    if dataset.samples.is_empty() {
        return Err(Error::Data(format!("client {} has nothing to evaluate", dataset.client_id)));
    }
    if preds.len() != dataset.samples.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} samples",
            preds.len(),
            dataset.samples.len()
        )));
    }
    // keyed by unit id so the result does not depend on sample order
    let mut units: BTreeMap<String, Vec<Overlap>> = BTreeMap::new();
    for (p, s) in preds.iter().zip(&dataset.samples) {
        let o = class_overlaps(p, &s.mask)?;
        let key = match (&s.volume_id, group_by_volume) {
            (Some(v), true) => format!("v:{v}"),
            _ => format!("s:{}", s.id),
        };
        match units.get_mut(&key) {
            Some(acc) => acc.iter_mut().zip(o).for_each(|(a, b)| *a += b),
            None => {
                units.insert(key, o);
            }
        }
    }
    let c = units.values().next().map_or(0, Vec::len);
    let n = units.len() as f64;
    let mut dice = vec![0.0; c];
    let mut iou = vec![0.0; c];
    for o in units.values() {
        for k in 0..c {
            dice[k] += o[k].dice();
            iou[k] += o[k].iou();
        }
    }
    dice.iter_mut().chain(iou.iter_mut()).for_each(|v| *v /= n);
    Ok(ClientMetrics {
        client_id: dataset.client_id,
        name: dataset.name.clone(),
        dice,
        iou,
        units: units.len(),
    })
}

/// Runs the model on every sample of `dataset` and scores the thresholded output.
pub fn evaluate_client(
    model: &MiniSam,
    params: &ParamRegistry,
    dataset: &ClientDataset,
    group_by_volume: bool,
) -> Result<ClientMetrics> {
    let preds = dataset
        .samples
        .iter()
        .map(|s| Ok(binarize(&model.forward(params, &s.image)?)))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(&preds, dataset, group_by_volume)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Row label, e.g. `FedMSA` or `SAM-PT`.
    pub label: String,
    pub protocol: String,
    pub mode: String,
    pub variant: String,
    pub pretrained: bool,
    pub seed: u64,
}

/// Per-client Dice/IoU table with Table-1-style averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub clients: Vec<ClientMetrics>,
}

impl MetricsReport {
    pub fn new(meta: ReportMeta, mut clients: Vec<ClientMetrics>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Data("a report needs at least one client".into()));
        }
        clients.sort_by_key(|c| c.client_id);
        Ok(Self { meta, clients })
    }

    /// Unweighted mean of the per-client averages.
    pub fn grand_dice(&self) -> f64 {
        self.clients.iter().map(ClientMetrics::mean_dice).sum::<f64>() / self.clients.len() as f64
    }

    pub fn grand_iou(&self) -> f64 {
        self.clients.iter().map(ClientMetrics::mean_iou).sum::<f64>() / self.clients.len() as f64
    }

    pub fn csv_header() -> &'static str {
        "label,protocol,mode,variant,pretrained,seed,client_id,client,class,dice,iou\n"
    }

    /// Per-class rows plus a `mean` row per client.
    pub fn csv_rows(&self) -> String {
        let m = &self.meta;
        let prefix = format!("{},{},{},{},{},{}", m.label, m.protocol, m.mode, m.variant, m.pretrained, m.seed);
        let mut out = String::new();
        for c in &self.clients {
            for (k, (d, i)) in c.dice.iter().zip(&c.iou).enumerate() {
                let _ = writeln!(out, "{prefix},{},{},{k},{d:.6},{i:.6}", c.client_id, c.name);
            }
            let _ = writeln!(
                out,
                "{prefix},{},{},mean,{:.6},{:.6}",
                c.client_id,
                c.name,
                c.mean_dice(),
                c.mean_iou()
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_markdown(&self) -> String {
        markdown_grid(std::slice::from_ref(self))
    }
}

/// Clients as columns with Dice/IoU sub-columns, one row per report, plus
/// an average column.
pub fn markdown_grid(reports: &[MetricsReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut out = String::from("| Method |");
    for c in &first.clients {
        let _ = write!(out, " {} Dice | {} IoU |", c.name, c.name);
    }
    out.push_str(" Average Dice | Average IoU |\n|---|");
    for _ in 0..=first.clients.len() {
        out.push_str("---|---|");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "| {} |", r.meta.label);
        for c in &r.clients {
            let _ = write!(out, " {:.4} | {:.4} |", c.mean_dice(), c.mean_iou());
        }
        let _ = writeln!(out, " {:.4} | {:.4} |", r.grand_dice(), r.grand_iou());
    }
    out
}

/// Result of a two-sided paired t-test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    /// Mean of `a - b`.
    pub gap: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Paired two-sided t-test on `a[i] - b[i]`. The sample variance is floored
/// at [`VARIANCE_FLOOR`], so identical inputs give `p = 1` and a constant
/// shift gives `p` near 0.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::Stat(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stat(format!("a paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).max(VARIANCE_FLOOR);
    let t = mean / (var / n as f64).sqrt();
    let df = n - 1;
    Ok(PairedTest {
        gap: mean,
        t,
        df,
        p: student_t_two_sided(t, df as f64),
    })
}

/// Paired test over per-client mean Dice of two reports on the same clients.
pub fn paired_compare(a: &MetricsReport, b: &MetricsReport) -> Result<PairedTest> {
    let ids = |r: &MetricsReport| r.clients.iter().map(|c| c.client_id).collect::<Vec<_>>();
    if ids(a) != ids(b) {
        return Err(Error::Stat("reports cover different clients".into()));
    }
    let da: Vec<f64> = a.clients.iter().map(ClientMetrics::mean_dice).collect();
    let db: Vec<f64> = b.clients.iter().map(ClientMetrics::mean_dice).collect();
    paired_t(&da, &db)
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    inc_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9) of ln Γ(x) for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // the continued fraction converges fastest on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz method.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
