//! Conditional generator training.
//!
//! One generator step synthesizes a labelled batch and minimizes
//!
//! ```text
//! L_gen = λ_adv · s · L_adv + λ_bn · L_bn + λ_oh · L_oh + λ_uni · L_uni
//! ```
//!
//! where `L_adv = KL(T || S)` is the teacher/student disagreement (with
//! `s = adv_sign`, default -1 so the generator seeks disagreement),
//! `L_bn` matches the teacher's BatchNorm statistics, `L_oh` is the
//! teacher's cross-entropy against the requested labels and
//! `L_uni = KL(U || f_{l+}(mask ⊙ Z))` pushes predictions made from
//! non-robust channels towards uniform.

use std::io::Write;
use std::path::Path;

use ferd_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FerdError, Result};
use crate::losses::{check_prob_rows, cross_entropy, kl_mean, kl_rows, kl_uniform_rows};
use crate::model_zoo::{BnTap, ForwardOpts, Model, LATENT_DIM};
use crate::nonrobust_ib::{self, ChannelMask, IbConfig};
use crate::optim::{collect_grads, Adam};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorHyper {
    pub lambda_adv: f64,
    pub lambda_bn: f64,
    pub lambda_oh: f64,
    pub lambda_uni: f64,
    /// Sign applied to `L_adv` inside the minimized objective: -1 makes the
    /// generator maximize teacher/student disagreement, +1 is the plain sum.
    pub adv_sign: f64,
}

impl Default for GeneratorHyper {
    fn default() -> Self {
        Self { lambda_adv: 1.0, lambda_bn: 5.0, lambda_oh: 1.0, lambda_uni: 5.0, adv_sign: -1.0 }
    }
}

impl GeneratorHyper {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_bn", self.lambda_bn),
            ("lambda_oh", self.lambda_oh),
            ("lambda_uni", self.lambda_uni),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FerdError::Config(format!("generator.{k} must be finite and >= 0, got {v}")));
            }
        }
        if self.adv_sign != 1.0 && self.adv_sign != -1.0 {
            return Err(FerdError::Config(format!("generator.adv_sign must be +1 or -1, got {}", self.adv_sign)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    /// `(B, channels, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(B, LATENT_DIM)`.
    pub latents: Tensor,
}

/// Draw latents from `rng` and generate images for `labels` in the
/// generator's current mode (BN running statistics are not updated).
pub fn synthesize(generator: &Model, labels: &[usize], rng: &mut Rng) -> Result<SyntheticBatch> {
    if labels.is_empty() {
        return Err(FerdError::Input("cannot synthesize an empty batch".into()));
    }
    let latents = rng::normal_tensor(rng, &[labels.len(), LATENT_DIM]);
    let images = generator.generate(&latents, labels)?;
    Ok(SyntheticBatch { images, labels: labels.to_vec(), latents })
}

/// `Σ_l ( ‖μ_l(x) - μ_l‖₂ + ‖σ²_l(x) - σ²_l‖₂ )` over the recorded taps.
pub fn bn_loss_graph(g: &mut Graph, teacher: &Model, taps: &[BnTap]) -> Option<Var> {
    let stats = teacher.bn_statistics();
    let mut total: Option<Var> = None;
    for tap in taps {
        let s = &stats[tap.layer];
        let rm = g.constant(Tensor::from_vec(&[s.running_mean.len()], s.running_mean.clone()).expect("bn length"));
        let rv = g.constant(Tensor::from_vec(&[s.running_var.len()], s.running_var.clone()).expect("bn length"));
        let dm = g.sub(tap.batch_mean, rm);
        let dv = g.sub(tap.batch_var, rv);
        let nm = g.l2_norm(dm);
        let nv = g.l2_norm(dv);
        let term = g.add(nm, nv);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total
}

/// BN-statistics matching loss of `images` under the teacher (eval-mode
/// forward, batch statistics observed at every BN input). A teacher
/// without BN layers yields 0 with a warning.
pub fn loss_bn(teacher: &Model, images: &Tensor) -> Result<f64> {
    teacher.check_images(images)?;
    if teacher.num_bn_layers() == 0 {
        log::warn!("loss_bn: teacher has no BatchNorm layers, returning 0");
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false);
    let x = g.constant(images.clone());
    let (_, taps) = teacher.forward_graph(&mut g, &bound, x, ForwardOpts::eval().with_bn_taps())?;
    Ok(bn_loss_graph(&mut g, teacher, &taps).map_or(0.0, |v| g.value(v).item()))
}

/// Plain-value BN loss from precomputed per-layer batch statistics.
pub fn bn_loss_from_stats(teacher: &Model, batch_stats: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let stats = teacher.bn_statistics();
    if stats.len() != batch_stats.len() {
        return Err(FerdError::Input(format!("{} batch statistics for {} BN layers", batch_stats.len(), stats.len())));
    }
    let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(stats
        .iter()
        .zip(batch_stats)
        .map(|(s, (m, v))| norm(m, &s.running_mean) + norm(v, &s.running_var))
        .sum())
}

/// `KL(T || S)`, batch mean, over probability tables.
pub fn loss_adv_gen(teacher_probs: &Tensor, student_probs: &Tensor) -> Result<f64> {
    kl_mean(teacher_probs, student_probs)
}

/// Mean cross-entropy of teacher logits against the requested labels.
pub fn loss_oh(teacher_logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if teacher_logits.ndim() != 2 || teacher_logits.dim(0) != labels.len() {
        return Err(FerdError::Input(format!("{} labels for logits {:?}", labels.len(), teacher_logits.shape())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= teacher_logits.dim(1)) {
        return Err(FerdError::Input(format!("label {bad} out of range")));
    }
    let mut g = Graph::new();
    let z = g.constant(teacher_logits.clone());
    let ce = cross_entropy(&mut g, z, labels);
    Ok(g.value(ce).item())
}

/// `KL(U || p)` batch mean for a table of non-robust predictions.
pub fn loss_uni_from_probs(probs: &Tensor) -> Result<f64> {
    check_prob_rows(probs, "non-robust prediction")?;
    let u = Tensor::full(probs.shape(), 1.0 / probs.dim(1) as f64);
    kl_mean(&u, probs)
}

/// `KL(U || softmax(f_{l+}(mask ⊙ Z)))`, batch mean.
pub fn loss_uni(teacher: &Model, z: &Tensor, layer_id: &str, mask: &ChannelMask) -> Result<f64> {
    loss_uni_from_probs(&nonrobust_ib::nonrobust_predict(teacher, z, layer_id, mask)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_adv: f64,
    pub l_bn: f64,
    pub l_oh: f64,
    pub l_uni: f64,
    pub l_gen: f64,
    pub mask: ChannelMask,
    /// The batch the losses were computed on (generator output before the
    /// parameter update).
    pub batch: SyntheticBatch,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FerdError::Numerical(format!("generator loss component {name} is {v}")))
    }
}

/// One optimizer step on the generator. Teacher and student enter the
/// graph as constants with eval-mode BN and are never modified; the
/// generator runs in train mode and its BN running statistics are updated.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    generator: &mut Model,
    opt: &mut Adam,
    teacher: &Model,
    student: &Model,
    labels: &[usize],
    hyper: &GeneratorHyper,
    ib: &IbConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    hyper.validate()?;
    if labels.is_empty() {
        return Err(FerdError::Input("generator step needs at least one label".into()));
    }
    let layer_id = ib.resolve_layer(teacher)?;
    let layer = teacher.layer_index(&layer_id)?;
    let latents = rng::normal_tensor(rng, &[labels.len(), LATENT_DIM]);

    let mut g = Graph::new();
    let gen_bound = generator.bind(&mut g, true);
    let zv = g.constant(latents.clone());
    let (x, gen_taps) = generator.generate_graph(&mut g, &gen_bound, zv, labels, ForwardOpts::train())?;

    let t_bound = teacher.bind(&mut g, false);
    let opts = ForwardOpts::eval().with_bn_taps();
    let mut t_taps = Vec::new();
    let feat = teacher.forward_until(&mut g, &t_bound, x, layer, opts, &mut t_taps)?;
    let t_logits = teacher.forward_from(&mut g, &t_bound, feat, layer, opts, &mut t_taps)?;

    // Non-robust channel mask from the bottleneck on this batch's features.
    let z_val = g.value(feat).clone();
    let (state, _) = nonrobust_ib::optimize_lambda_on(teacher, &z_val, labels, &layer_id, ib, rng)?;
    let z_i = nonrobust_ib::inject_noise(&z_val, &state, rng)?;
    let mask = nonrobust_ib::channel_mask(&state, &z_i)?;
    if mask.degenerate {
        log::warn!("generator step: non-robust channel mask is empty");
    }

    let l_bn = match bn_loss_graph(&mut g, teacher, &t_taps) {
        Some(v) => v,
        None => {
            log::warn!("generator step: teacher has no BatchNorm layers, L_bn = 0");
            g.constant(Tensor::scalar(0.0))
        }
    };
    let l_oh = cross_entropy(&mut g, t_logits, labels);
    let nr_logits = nonrobust_ib::masked_logits(&mut g, teacher, &t_bound, feat, &layer_id, &mask)?;
    let nr_probs = g.softmax(nr_logits);
    let l_uni = kl_uniform_rows(&mut g, nr_probs);

    let s_bound = student.bind(&mut g, false);
    let (s_logits, _) = student.forward_graph(&mut g, &s_bound, x, ForwardOpts::eval())?;
    let tp = g.softmax(t_logits);
    let sp = g.softmax(s_logits);
    let l_adv = kl_rows(&mut g, tp, sp);

    let terms = [
        (l_adv, hyper.lambda_adv * hyper.adv_sign),
        (l_bn, hyper.lambda_bn),
        (l_oh, hyper.lambda_oh),
        (l_uni, hyper.lambda_uni),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let s = g.scale(v, w);
        total = g.add(total, s);
    }

    let breakdown = LossBreakdown {
        l_adv: finite("L_adv", g.value(l_adv).item())?,
        l_bn: finite("L_bn", g.value(l_bn).item())?,
        l_oh: finite("L_oh", g.value(l_oh).item())?,
        l_uni: finite("L_uni", g.value(l_uni).item())?,
        l_gen: finite("L_gen", g.value(total).item())?,
        mask,
        batch: SyntheticBatch { images: g.value(x).clone(), labels: labels.to_vec(), latents },
    };
    let grads = g.backward(total);
    opt.step(generator, &collect_grads(&grads, &gen_bound))?;
    generator.commit_bn_stats(&g, &gen_taps);
    Ok(breakdown)
}

/// Per-layer `(mean, var)` batch statistics at every teacher BN input,
/// computed with plain tensor code (eval-mode forward).
pub fn teacher_bn_batch_stats(teacher: &Model, images: &Tensor) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false);
    let x = g.constant(images.clone());
    let (_, taps) = teacher.forward_graph(&mut g, &bound, x, ForwardOpts::eval().with_bn_taps())?;
    let mut out = vec![(Vec::new(), Vec::new()); teacher.num_bn_layers()];
    for t in taps {
        out[t.layer] = (g.value(t.batch_mean).data().to_vec(), g.value(t.batch_var).data().to_vec());
    }
    Ok(out)
}

/// Appends `step,L_adv,L_bn,L_oh,L_uni,L_gen` rows.
pub struct LossLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(["step", "L_adv", "L_bn", "L_oh", "L_uni", "L_gen"])?;
        Ok(Self { out })
    }

    pub fn push(&mut self, step: usize, l: &LossBreakdown) -> Result<()> {
        self.out.write_record([
            step.to_string(),
            l.l_adv.to_string(),
            l.l_bn.to_string(),
            l.l_oh.to_string(),
            l.l_uni.to_string(),
            l.l_gen.to_string(),
        ])?;
        self.out.flush()?;
        Ok(())
    }
}

/// Tile a batch of images into a PNG grid with `cols` columns.
pub fn save_sample_grid(images: &Tensor, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    if images.ndim() != 4 || !(images.dim(1) == 1 || images.dim(1) == 3) {
        return Err(FerdError::Input(format!("sample grid needs (B, 1|3, H, W) images, got {:?}", images.shape())));
    }
    let (n, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let mut img = image::RgbImage::new((cols * (w + 1) + 1) as u32, (rows * (h + 1) + 1) as u32);
    for k in 0..n {
        let s = images.sample(k);
        let (ox, oy) = ((k % cols) * (w + 1) + 1, (k / cols) * (h + 1) + 1);
        for i in 0..h {
            for j in 0..w {
                let px = |ch: usize| (s[(ch.min(c - 1) * h + i) * w + j].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((ox + j) as u32, (oy + i) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    img.save(path.as_ref())
        .map_err(|e| FerdError::Io(std::io::Error::other(e.to_string())))
}

/// Entropy (nats) of the batch-mean prediction.
pub fn mean_prediction_entropy(probs: &Tensor) -> f64 {
    let (b, c) = (probs.dim(0), probs.dim(1));
    (0..c)
        .map(|j| (0..b).map(|i| probs.row(i)[j]).sum::<f64>() / b as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}
