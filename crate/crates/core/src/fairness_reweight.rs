//! Robustness-guided class reweighting.
//!
//! The teacher's adversarial margin on each synthetic sample measures how
//! close the attack came to (or how far it got past) flipping the
//! prediction. Averaging the negative margin per class gives a
//! vulnerability score; a softmax over those scores becomes the label
//! distribution for the next round of generation, so fragile classes get
//! more samples.

use std::io::Write;

use ferd_autograd::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FerdError, Result};
use crate::losses::check_prob_rows;
use crate::rng::Rng;

/// `p_y - max_{j != y} p_j` for one probability vector. Ties with another
/// class give `m <= 0`, i.e. count as a successful attack.
pub fn adversarial_margin(probs: &[f64], y: usize) -> Result<f64> {
    let c = probs.len();
    if c < 2 {
        return Err(FerdError::Input(format!("margin needs at least 2 classes, got {c}")));
    }
    if y >= c {
        return Err(FerdError::Input(format!("label {y} out of range for {c} classes")));
    }
    let s: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
        return Err(FerdError::Input(format!("margin input is not a probability vector (sum {s})")));
    }
    let rival = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((probs[y] - rival).clamp(-1.0, 1.0))
}

/// Margins for every row of a `(B, C)` probability table.
pub fn batch_margins(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_prob_rows(probs, "probs")?;
    if labels.len() != probs.dim(0) {
        return Err(FerdError::Input(format!("{} labels for {} probability rows", labels.len(), probs.dim(0))));
    }
    labels.iter().enumerate().map(|(i, &y)| adversarial_margin(probs.row(i), y)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassVulnerability {
    /// Mean negative margin per class.
    pub d: Vec<f64>,
    pub counts: Vec<usize>,
    /// True for classes with no samples, whose `d` is imputed.
    pub imputed: Vec<bool>,
}

/// Per-class mean of `-m_i`. Classes without samples receive the mean of
/// the observed class scores and are flagged.
pub fn class_vulnerability(margins: &[f64], labels: &[usize], num_classes: usize) -> Result<ClassVulnerability> {
    if margins.len() != labels.len() {
        return Err(FerdError::Input(format!("{} margins for {} labels", margins.len(), labels.len())));
    }
    if margins.is_empty() {
        return Err(FerdError::Input("class vulnerability needs at least one sample".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(FerdError::Input(format!("label {bad} out of range for {num_classes} classes")));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(FerdError::Input("non-finite margin".into()));
    }
    let mut sums = vec![0.0; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (&m, &y) in margins.iter().zip(labels) {
        sums[y] -= m;
        counts[y] += 1;
    }
    let observed: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(&s, &n)| s / n as f64)
        .collect();
    let fill = observed.iter().sum::<f64>() / observed.len() as f64;
    let imputed: Vec<bool> = counts.iter().map(|&n| n == 0).collect();
    let d = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { fill })
        .collect();
    Ok(ClassVulnerability { d, counts, imputed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSamplingWeights {
    pub p: Vec<f64>,
    pub temperature: f64,
}

impl ClassSamplingWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self { p: vec![1.0 / num_classes as f64; num_classes], temperature: 1.0 }
    }

    pub fn num_classes(&self) -> usize {
        self.p.len()
    }
}

/// `p = softmax(D / τ)`.
pub fn sampling_weights(d: &[f64], temperature: f64) -> Result<ClassSamplingWeights> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(FerdError::Config(format!("reweight temperature must be > 0, got {temperature}")));
    }
    if d.is_empty() || d.iter().any(|v| !v.is_finite()) {
        return Err(FerdError::Input("vulnerability vector must be non-empty and finite".into()));
    }
    let t = Tensor::from_vec(&[1, d.len()], d.iter().map(|v| v / temperature).collect())?;
    Ok(ClassSamplingWeights { p: t.softmax_rows().into_data(), temperature })
}

/// Draw `batch_size` i.i.d. labels from `weights.p` by inverse CDF.
pub fn sample_labels(weights: &ClassSamplingWeights, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.p.len());
    let mut acc = 0.0;
    for &p in &weights.p {
        acc += p;
        cdf.push(acc);
    }
    let total = acc;
    // The last class with positive mass absorbs rounding at the top.
    let top = weights.p.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (0..batch_size)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            cdf.iter().position(|&c| u < c).unwrap_or(top).min(top)
        })
        .collect()
}

/// Append `epoch,class,D_c,p_c` rows (header written when `header`).
pub fn write_weights_csv<W: Write>(w: W, header: bool, rows: &[(usize, ClassVulnerability, ClassSamplingWeights)]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        out.write_record(["epoch", "class", "D_c", "p_c"])?;
    }
    for (epoch, v, p) in rows {
        for c in 0..p.p.len() {
            out.write_record([epoch.to_string(), c.to_string(), v.d[c].to_string(), p.p[c].to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
