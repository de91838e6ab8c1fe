//! PGD adversarial training for a desk-scale robust teacher.

use ferd_autograd::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_model, Arch, ForwardOpts, Mode, Model};
use crate::attacks::{pgd, AttackSpec};
use crate::data::Dataset;
use crate::error::{FerdError, Result};
use crate::losses::cross_entropy;
use crate::optim::{collect_grads, cosine_lr, Sgd, SgdConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherTrainConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training attack (PGD-10 at 8/255 by default).
    pub attack: AttackSpec,
    pub optimizer: SgdConfig,
    /// Samples of the monitoring set used for the per-epoch log.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::TinyCnn,
            epochs: 10,
            batch_size: 64,
            attack: AttackSpec::pgd(10),
            optimizer: SgdConfig { lr: 0.05, ..SgdConfig::default() },
            eval_samples: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

fn accuracy(model: &Model, x: &Tensor, y: &[usize]) -> Result<f64> {
    let pred = model.forward(x)?.argmax_rows();
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

/// Madry-style min-max training: each batch is replaced by its PGD
/// adversarial counterpart (crafted against the current weights with eval
/// BN), then the cross-entropy on it is minimized with SGD.
///
/// Clean and PGD accuracy on `monitor` (or the training set when `None`)
/// are logged after every epoch. `epochs = 0` returns the initial model.
pub fn train_robust_teacher(train: &Dataset, monitor: Option<&Dataset>, cfg: &TeacherTrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(FerdError::Input("teacher training set is empty".into()));
    }
    if cfg.attack.steps == 0 {
        return Err(FerdError::Config("teacher attack must take at least one PGD step".into()));
    }
    cfg.attack.validate()?;
    if !cfg.arch.is_classifier() {
        return Err(FerdError::Config(format!("teacher arch must be a classifier, got {}", cfg.arch)));
    }
    let mut model = build_model(cfg.arch, train.num_classes, train.image_shape(), cfg.seed)?;
    let mut opt = Sgd::new(&model, cfg.optimizer.clone());
    let monitor = monitor.unwrap_or(train);
    let n_mon = cfg.eval_samples.clamp(1, monitor.len());
    let mon_idx: Vec<usize> = (0..n_mon).collect();
    let (mon_x, mon_y) = monitor.batch(&mon_idx);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.optimizer.lr, epoch, cfg.epochs);
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::derive(cfg.seed, &[0x7465_6163, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let (x, y) = train.batch(idx);
            model.set_mode(Mode::Eval);
            let spec = cfg.attack.clone().with_seed(rng::derive_seed(cfg.seed, &[0x6174_6b, epoch as u64, b as u64]));
            let adv = pgd(&model, &x, &y, &spec)?;
            model.set_mode(Mode::Train);

            let mut g = ferd_autograd::Graph::new();
            let bound = model.bind(&mut g, true);
            let xv = g.constant(adv);
            let (logits, taps) = model.forward_graph(&mut g, &bound, xv, ForwardOpts::train())?;
            let loss = cross_entropy(&mut g, logits, &y);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(FerdError::Numerical(format!("teacher loss is {lv} at epoch {epoch}, batch {b}")));
            }
            let grads = g.backward(loss);
            opt.step(&mut model, &collect_grads(&grads, &bound))?;
            model.commit_bn_stats(&g, &taps);
            if model.params().iter().any(|p| !p.value.is_finite()) {
                return Err(FerdError::Numerical(format!("teacher parameters diverged at epoch {epoch}, batch {b}")));
            }
            loss_sum += lv;
            batches += 1;
        }
        model.set_mode(Mode::Eval);
        let clean_acc = accuracy(&model, &mon_x, &mon_y)?;
        let adv = pgd(&model, &mon_x, &mon_y, &cfg.attack.clone().with_seed(rng::derive_seed(cfg.seed, &[0x6d6f_6e, epoch as u64])))?;
        let robust_acc = accuracy(&model, &adv, &mon_y)?;
        let log = EpochLog { epoch, lr, train_loss: loss_sum / batches as f64, clean_acc, robust_acc };
        log::info!(
            "teacher epoch {epoch}: loss {:.4} clean {:.3} robust {:.3}",
            log.train_loss, clean_acc, robust_acc
        );
        logs.push(log);
    }
    model.set_mode(Mode::Eval);
    Ok((model, logs))
}
