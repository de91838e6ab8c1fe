//! Class-wise robustness evaluation and reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ferd_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::attacks::{targeted_pgd, AttackKind, AttackSpec};
use crate::data::Dataset;
use crate::error::{FerdError, Result};
use crate::model_zoo::{Mode, Model};
use crate::rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const NSD_DEFINITION: &str = "cv_population";

/// Predicted labels of `model` (eval-mode BN) on `x`, in chunks of `batch`.
pub fn predict(model: &Model, x: &Tensor, batch: usize) -> Result<Vec<usize>> {
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    let n = x.dim(0);
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (s..(s + batch.max(1)).min(n)).collect();
        out.extend(m.forward(&x.select(&idx))?.argmax_rows());
    }
    Ok(out)
}

/// Predictions on the dataset after applying `attack` batch by batch.
/// Each batch gets its own attack seed derived from `spec.seed`.
pub fn attacked_predictions(model: &Model, data: &Dataset, attack: AttackKind, spec: &AttackSpec, batch: usize) -> Result<Vec<usize>> {
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    let mut out = Vec::with_capacity(data.len());
    for (b, idx) in data.chunks(batch).enumerate() {
        let (x, y) = data.batch(&idx);
        let s = spec.clone().with_seed(rng::derive_seed(spec.seed, &[b as u64]));
        let adv = attack.apply(&m, &x, &y, &s)?;
        out.extend(m.forward(&adv)?.argmax_rows());
    }
    Ok(out)
}

fn check_pairs(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<()> {
    if pred.len() != labels.len() {
        return Err(FerdError::Input(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    if pred.iter().chain(labels).any(|&v| v >= num_classes) {
        return Err(FerdError::Input(format!("class index out of range for {num_classes} classes")));
    }
    Ok(())
}

/// `correct_c / total_c`; a class without samples is an error.
pub fn per_class_from_predictions(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    check_pairs(pred, labels, num_classes)?;
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        total[y] += 1;
        correct[y] += usize::from(p == y);
    }
    if let Some(c) = total.iter().position(|&t| t == 0) {
        return Err(FerdError::Input(format!("class {c} has no evaluation samples")));
    }
    Ok(correct.iter().zip(&total).map(|(&k, &n)| k as f64 / n as f64).collect())
}

/// Clean (`attack = None`) or attacked per-class accuracy.
pub fn per_class_accuracy(model: &Model, data: &Dataset, attack: Option<(AttackKind, &AttackSpec)>, batch: usize) -> Result<Vec<f64>> {
    let pred = match attack {
        None => predict(model, &data.images, batch)?,
        Some((kind, spec)) => attacked_predictions(model, data, kind, spec, batch)?,
    };
    per_class_from_predictions(&pred, &data.labels, data.num_classes)
}

fn nonempty(acc: &[f64]) -> Result<()> {
    if acc.is_empty() {
        Err(FerdError::Input("accuracy vector is empty".into()))
    } else {
        Ok(())
    }
}

/// Arithmetic mean, clamped into `[min, max]` so that rounding can never
/// place it outside the range of the values.
pub fn average(acc: &[f64]) -> Result<f64> {
    nonempty(acc)?;
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((acc.iter().sum::<f64>() / acc.len() as f64).clamp(lo, hi))
}

pub fn worst_class(acc: &[f64]) -> Result<f64> {
    nonempty(acc)?;
    Ok(acc.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Mean of the `⌈k·C/100⌉` lowest accuracies (ties by class index).
///
/// The result is clamped into `[worst, avg]`: both bounds hold exactly in
/// real arithmetic, and the clamp only removes summation-order rounding.
pub fn worst_k_percent(acc: &[f64], k: f64) -> Result<f64> {
    nonempty(acc)?;
    if !(k > 0.0 && k <= 100.0) {
        return Err(FerdError::Config(format!("worst-k percentage must lie in (0, 100], got {k}")));
    }
    let n = ((k * acc.len() as f64 / 100.0).ceil() as usize).clamp(1, acc.len());
    let mut order: Vec<usize> = (0..acc.len()).collect();
    order.sort_by(|&a, &b| acc[a].total_cmp(&acc[b]).then(a.cmp(&b)));
    let tail = order[..n].iter().map(|&i| acc[i]).sum::<f64>() / n as f64;
    Ok(tail.min(average(acc)?).max(acc[order[0]]))
}

/// Population standard deviation divided by the mean.
pub fn nsd(acc: &[f64]) -> Result<f64> {
    let mean = average(acc)?;
    if mean == 0.0 {
        return Err(FerdError::Input("NSD is undefined for a zero-mean accuracy vector".into()));
    }
    if acc.iter().all(|&a| a == acc[0]) {
        return Ok(0.0);
    }
    let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / acc.len() as f64;
    Ok(var.sqrt() / mean)
}

/// `m[i][j]` counts true-class-`i` samples predicted as `j`.
pub fn confusion_from_predictions(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    check_pairs(pred, labels, num_classes)?;
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in pred.iter().zip(labels) {
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn confusion_matrix(model: &Model, data: &Dataset, attack: AttackKind, spec: &AttackSpec, batch: usize) -> Result<Vec<Vec<u64>>> {
    let pred = attacked_predictions(model, data, attack, spec, batch)?;
    confusion_from_predictions(&pred, &data.labels, data.num_classes)
}

/// `diag / rowsum` of a confusion matrix.
pub fn accuracy_from_confusion(m: &[Vec<u64>]) -> Result<Vec<f64>> {
    m.iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            if n == 0 {
                Err(FerdError::Input(format!("class {i} has no evaluation samples")))
            } else {
                Ok(row[i] as f64 / n as f64)
            }
        })
        .collect()
}

/// Targeted-PGD success rates: entry `(s, t)` is the fraction of class-`s`
/// samples driven to predict `t` (the diagonal holds clean accuracy under
/// the targeted attack towards the true class).
pub fn targeted_success_matrix(model: &Model, data: &Dataset, spec: &AttackSpec, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    let c = data.num_classes;
    let counts = data.class_counts();
    let mut hits = vec![vec![0usize; c]; c];
    for t in 0..c {
        for (b, idx) in data.chunks(batch).enumerate() {
            let (x, y) = data.batch(&idx);
            let s = spec.clone().with_seed(rng::derive_seed(spec.seed, &[t as u64, b as u64]));
            let adv = targeted_pgd(&m, &x, &vec![t; y.len()], &s)?;
            for (p, &yy) in m.forward(&adv)?.argmax_rows().into_iter().zip(&y) {
                hits[yy][t] += usize::from(p == t);
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(row, &n)| row.iter().map(|&h| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub avg: f64,
    pub worst: f64,
    pub worst_k: f64,
    pub nsd: f64,
}

impl Aggregates {
    /// An all-zero accuracy vector (the only zero-mean case) is reported
    /// with `nsd = 0` so the report stays finite.
    pub fn from_accuracy(acc: &[f64], k: f64) -> Result<Self> {
        let avg = average(acc)?;
        let nsd = if avg == 0.0 { 0.0 } else { nsd(acc)? };
        Ok(Self { avg, worst: worst_class(acc)?, worst_k: worst_k_percent(acc, k)?, nsd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub run_id: String,
    pub checkpoint: String,
    pub dataset: String,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub worst_k_percent: f64,
    pub nsd_definition: String,
    pub attacks: BTreeMap<String, AttackSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub metadata: ReportMetadata,
    pub per_class_acc: BTreeMap<String, Vec<f64>>,
    pub aggregates: BTreeMap<String, Aggregates>,
    pub confusion: BTreeMap<String, Vec<Vec<u64>>>,
}

/// Evaluate `model` under each attack and assemble a report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    attacks: &[(AttackKind, AttackSpec)],
    worst_k: f64,
    batch: usize,
    run_id: &str,
    checkpoint: &str,
    dataset_name: &str,
) -> Result<EvalReport> {
    model.expect_classes(data.num_classes)?;
    let mut per_class_acc = BTreeMap::new();
    let mut aggregates = BTreeMap::new();
    let mut confusion = BTreeMap::new();
    let mut specs = BTreeMap::new();
    for (kind, spec) in attacks {
        let pred = attacked_predictions(model, data, *kind, spec, batch)?;
        let acc = per_class_from_predictions(&pred, &data.labels, data.num_classes)?;
        let name = kind.name().to_string();
        aggregates.insert(name.clone(), Aggregates::from_accuracy(&acc, worst_k)?);
        confusion.insert(name.clone(), confusion_from_predictions(&pred, &data.labels, data.num_classes)?);
        per_class_acc.insert(name.clone(), acc);
        specs.insert(name, spec.clone());
        log::info!("eval {}: avg {:.4} worst {:.4}", kind.name(), aggregates[kind.name()].avg, aggregates[kind.name()].worst);
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: ReportMetadata {
            run_id: run_id.to_string(),
            checkpoint: checkpoint.to_string(),
            dataset: dataset_name.to_string(),
            num_classes: data.num_classes,
            class_counts: data.class_counts(),
            worst_k_percent: worst_k,
            nsd_definition: NSD_DEFINITION.to_string(),
            attacks: specs,
        },
        per_class_acc,
        aggregates,
        confusion,
    };
    validate_report(&report)?;
    Ok(report)
}

fn schema(field: impl Into<String>, detail: impl Into<String>) -> FerdError {
    FerdError::Schema { field: field.into(), detail: detail.into() }
}

/// Structural and numerical consistency of a report: every attack listed
/// in the metadata has per-class, aggregate and confusion entries, all
/// accuracies lie in `[0, 1]`, aggregates equal their recomputation and
/// confusion rows sum to the class counts.
pub fn validate_report(r: &EvalReport) -> Result<()> {
    let c = r.metadata.num_classes;
    if r.metadata.class_counts.len() != c {
        return Err(schema("metadata.class_counts", format!("expected {c} entries")));
    }
    for name in r.metadata.attacks.keys() {
        let acc = r
            .per_class_acc
            .get(name)
            .ok_or_else(|| schema(format!("per_class_acc.{name}"), "missing attack key"))?;
        let agg = r
            .aggregates
            .get(name)
            .ok_or_else(|| schema(format!("aggregates.{name}"), "missing attack key"))?;
        let conf = r
            .confusion
            .get(name)
            .ok_or_else(|| schema(format!("confusion.{name}"), "missing attack key"))?;
        if acc.len() != c || acc.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(schema(format!("per_class_acc.{name}"), format!("expected {c} accuracies in [0, 1]")));
        }
        let want = Aggregates::from_accuracy(acc, r.metadata.worst_k_percent)?;
        if &want != agg {
            return Err(schema(format!("aggregates.{name}"), "does not match the per-class vector"));
        }
        if conf.len() != c || conf.iter().any(|row| row.len() != c) {
            return Err(schema(format!("confusion.{name}"), format!("expected a {c}x{c} matrix")));
        }
        for (i, row) in conf.iter().enumerate() {
            if row.iter().sum::<u64>() != r.metadata.class_counts[i] as u64 {
                return Err(schema(format!("confusion.{name}[{i}]"), "row sum differs from the class count"));
            }
        }
        if accuracy_from_confusion(conf)? != *acc {
            return Err(schema(format!("confusion.{name}"), "diagonal disagrees with per_class_acc"));
        }
    }
    for key in r.per_class_acc.keys() {
        if !r.metadata.attacks.contains_key(key) {
            return Err(schema(format!("per_class_acc.{key}"), "attack not listed in metadata.attacks"));
        }
    }
    Ok(())
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    validate_report(report)?;
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Parse a report from JSON text, checking the schema version first.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let obj = v.as_object().ok_or_else(|| schema("$", "report must be a JSON object"))?;
    let version = obj
        .get("schema_version")
        .ok_or_else(|| schema("schema_version", "missing"))?
        .as_u64()
        .ok_or_else(|| schema("schema_version", "not an unsigned integer"))?;
    if version != REPORT_SCHEMA_VERSION as u64 {
        return Err(FerdError::Mismatch {
            field: "schema_version".into(),
            expected: REPORT_SCHEMA_VERSION.to_string(),
            found: format!("{version} (no migration available)"),
        });
    }
    for key in ["metadata", "per_class_acc", "aggregates", "confusion"] {
        if !obj.contains_key(key) {
            return Err(schema(key, "missing"));
        }
    }
    let report: EvalReport = serde_json::from_value(v).map_err(|e| schema("$", e.to_string()))?;
    validate_report(&report)?;
    Ok(report)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FerdError::MissingFile(path.to_path_buf()),
        _ => FerdError::Io(e),
    })?;
    parse_report(&text)
}

/// Per-class bar data: `model,attack,class,accuracy`.
pub fn write_per_class_csv<W: Write>(w: W, series: &[(&str, &EvalReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "attack", "class", "accuracy"])?;
    for (model, r) in series {
        for (attack, acc) in &r.per_class_acc {
            for (c, a) in acc.iter().enumerate() {
                out.write_record([model.to_string(), attack.clone(), c.to_string(), a.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Matrix dump for heatmaps: `row,col,value`.
pub fn write_matrix_csv<W: Write, T: ToString>(w: W, m: &[Vec<T>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row", "col", "value"])?;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.write_record([i.to_string(), j.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
