//! Variational information bottleneck over one feature layer of the
//! teacher, used to locate non-robust channels.
//!
//! Each channel `c` of the probed activation `Z` gets a learnable noise
//! scale `λ_c = softplus(λ_r,c)`; the noisy activation
//! `Z_I = Z + λ ⊙ ε` is pushed through the rest of the teacher. Minimizing
//!
//! ```text
//! CE(f_{l+}(Z_I), y) + β Σ_c ( v_c / λ_c² + ln(λ_c² / v_c) - 1 )
//! ```
//!
//! (with `v_c` the variance of channel `c` of `Z_I`) lets noise grow on
//! channels the prediction does not depend on. Channels whose learnt
//! noise stays below the largest channel variance are treated as
//! perturbation-sensitive (non-robust).

use std::io::Write;

use ferd_autograd::{channel_vars, softplus, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{FerdError, Result};
use crate::losses::cross_entropy;
use crate::model_zoo::{Bound, ForwardOpts, Model};
use crate::rng::{self, Rng};

/// Lower clamp on channel variances inside the regularizer's logarithm.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckState {
    /// Pre-softplus noise scales, one per channel.
    pub lambda_raw: Vec<f64>,
    pub beta: f64,
    pub layer_id: String,
}

impl BottleneckState {
    pub fn new(layer_id: impl Into<String>, channels: usize, beta: f64, init: f64) -> Self {
        Self { lambda_raw: vec![init; channels], beta, layer_id: layer_id.into() }
    }

    /// `λ_c = softplus(λ_r,c)`.
    pub fn lambda(&self) -> Vec<f64> {
        self.lambda_raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn channels(&self) -> usize {
        self.lambda_raw.len()
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.ndim() != 4 || z.dim(1) != self.channels() {
            return Err(FerdError::Input(format!(
                "activation {:?} does not have the {} channels of the bottleneck state",
                z.shape(),
                self.channels()
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(FerdError::Config(format!("IB beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IbConfig {
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    /// Initial `λ_r` for every channel.
    pub init: f64,
    /// Probed layer; the last conv block when absent.
    pub layer_id: Option<String>,
}

impl Default for IbConfig {
    fn default() -> Self {
        Self { beta: 0.01, steps: 30, lr: 0.1, init: 0.0, layer_id: None }
    }
}

impl IbConfig {
    pub fn resolve_layer(&self, teacher: &Model) -> Result<String> {
        match &self.layer_id {
            Some(l) => {
                teacher.layer_index(l)?;
                Ok(l.clone())
            }
            None => teacher.last_conv_layer(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    /// 1 for non-robust channels, 0 otherwise.
    pub mask: Vec<u8>,
    /// No channel selected.
    pub degenerate: bool,
}

impl ChannelMask {
    pub fn ones(channels: usize) -> Self {
        Self { mask: vec![1; channels], degenerate: false }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| m as f64).collect()
    }
}

/// `Σ_c ( v_c / λ_c² + ln(λ_c² / v_c) - 1 )` for plain values.
pub fn regularizer(lambda_sq: &[f64], v: &[f64]) -> f64 {
    lambda_sq
        .iter()
        .zip(v)
        .map(|(&l2, &vc)| vc / l2 + (l2 / vc).ln() - 1.0)
        .sum()
}

/// Inverse of softplus, for constructing states with a given `λ`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `Z_I = Z + softplus(λ_r) ⊙ ε`, `ε ~ N(0, I)` drawn from `rng`.
pub fn inject_noise(z: &Tensor, state: &BottleneckState, rng: &mut Rng) -> Result<Tensor> {
    state.check(z)?;
    let eps = rng::normal_tensor(rng, z.shape());
    Ok(add_scaled_noise(z, &state.lambda(), &eps))
}

fn add_scaled_noise(z: &Tensor, lambda: &[f64], eps: &Tensor) -> Tensor {
    let (c, hw) = (z.dim(1), z.dim(2) * z.dim(3));
    let mut out = z.clone();
    for (i, (o, &e)) in out.data_mut().iter_mut().zip(eps.data()).enumerate() {
        *o += lambda[(i / hw) % c] * e;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct IbLoss {
    pub value: f64,
    pub ce: f64,
    /// Unweighted regularizer sum.
    pub regularizer: f64,
    /// `∂ loss / ∂ λ_r`.
    pub grad: Vec<f64>,
    /// Channels whose variance hit [`VAR_FLOOR`].
    pub clamped: Vec<bool>,
}

/// Multiply channel `c` of `z` by `mask[c]` on the graph.
pub fn mask_channels(g: &mut Graph, z: Var, mask: &[f64]) -> Var {
    let c = mask.len();
    let scale = g.constant(Tensor::from_vec(&[c], mask.to_vec()).expect("mask length"));
    let shift = g.constant(Tensor::zeros(&[c]));
    g.channel_affine(z, scale, shift)
}

/// Information-bottleneck loss for an explicit noise draw `eps`.
pub fn ib_loss_with_noise(teacher: &Model, z: &Tensor, state: &BottleneckState, y: &[usize], eps: &Tensor) -> Result<IbLoss> {
    state.check(z)?;
    teacher.check_activation(z, &state.layer_id)?;
    if eps.shape() != z.shape() {
        return Err(FerdError::Input(format!("noise {:?} does not match activation {:?}", eps.shape(), z.shape())));
    }
    if y.len() != z.dim(0) {
        return Err(FerdError::Input(format!("{} labels for a batch of {}", y.len(), z.dim(0))));
    }
    teacher.check_labels(y)?;
    let layer = teacher.layer_index(&state.layer_id)?;
    let c = state.channels();

    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false);
    let raw = g.param(Tensor::from_vec(&[c], state.lambda_raw.clone())?);
    let lam = g.softplus(raw);
    let zv = g.constant(z.clone());
    let ev = g.constant(eps.clone());
    let zero = g.constant(Tensor::zeros(&[c]));
    let noise = g.channel_affine(ev, lam, zero);
    let zi = g.add(zv, noise);
    let mut taps = Vec::new();
    let logits = teacher.forward_from(&mut g, &bound, zi, layer, ForwardOpts::eval(), &mut taps)?;
    let ce = cross_entropy(&mut g, logits, y);

    let v_raw = g.channel_var(zi);
    let clamped: Vec<bool> = g.value(v_raw).data().iter().map(|&v| v < VAR_FLOOR).collect();
    let v = g.clamp_min(v_raw, VAR_FLOOR);
    let l2 = g.square(lam);
    let ratio = g.div(v, l2);
    let inv = g.div(l2, v);
    let log = g.ln(inv);
    let t = g.add(ratio, log);
    let t = g.add_scalar(t, -1.0);
    let reg = g.sum(t);
    let weighted = g.scale(reg, state.beta);
    let loss = g.add(ce, weighted);

    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(FerdError::Numerical(format!("IB loss is {value}")));
    }
    if clamped.iter().any(|&b| b) {
        log::warn!("IB: {} constant channel(s) clamped to variance {VAR_FLOOR}", clamped.iter().filter(|&&b| b).count());
    }
    let grads = g.backward(loss);
    Ok(IbLoss {
        value,
        ce: g.value(ce).item(),
        regularizer: g.value(reg).item(),
        grad: grads.get(raw).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; c]),
        clamped,
    })
}

/// Information-bottleneck loss with noise drawn from `rng`.
pub fn ib_loss(teacher: &Model, z: &Tensor, state: &BottleneckState, y: &[usize], rng: &mut Rng) -> Result<IbLoss> {
    let eps = rng::normal_tensor(rng, z.shape());
    ib_loss_with_noise(teacher, z, state, y, &eps)
}

/// Probed activation of `x` at `layer_id` with eval-mode BN.
pub fn probe(teacher: &Model, x: &Tensor, layer_id: &str) -> Result<Tensor> {
    let layer = teacher.layer_index(layer_id)?;
    teacher.check_images(x)?;
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let z = teacher.forward_until(&mut g, &bound, xv, layer, ForwardOpts::eval(), &mut Vec::new())?;
    Ok(g.value(z).clone())
}

/// Gradient descent on `λ_r` with `Z` computed once from `batch` and fresh
/// noise every step. Returns the final state and the loss trace.
pub fn optimize_lambda(teacher: &Model, batch: &Tensor, labels: &[usize], cfg: &IbConfig, rng: &mut Rng) -> Result<(BottleneckState, Vec<f64>)> {
    let layer_id = cfg.resolve_layer(teacher)?;
    let z = probe(teacher, batch, &layer_id)?;
    optimize_lambda_on(teacher, &z, labels, &layer_id, cfg, rng)
}

/// [`optimize_lambda`] for an already probed activation `z`.
pub fn optimize_lambda_on(teacher: &Model, z: &Tensor, labels: &[usize], layer_id: &str, cfg: &IbConfig, rng: &mut Rng) -> Result<(BottleneckState, Vec<f64>)> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(FerdError::Config(format!("IB learning rate must be > 0, got {}", cfg.lr)));
    }
    let mut state = BottleneckState::new(layer_id, z.dim(1), cfg.beta, cfg.init);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let l = ib_loss(teacher, z, &state, labels, rng).map_err(|e| match e {
            FerdError::Numerical(m) => FerdError::Numerical(format!("IB step {step}: {m}")),
            other => other,
        })?;
        for (r, g) in state.lambda_raw.iter_mut().zip(&l.grad) {
            *r -= cfg.lr * g;
        }
        trace.push(l.value);
    }
    Ok((state, trace))
}

/// Non-robust channels: `λ_k² < max_c Var(Z_I^c)`.
pub fn channel_mask(state: &BottleneckState, z_i: &Tensor) -> Result<ChannelMask> {
    state.check(z_i)?;
    let max_var = channel_vars(z_i).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let mask: Vec<u8> = state.lambda().iter().map(|&l| u8::from(l * l < max_var)).collect();
    let degenerate = mask.iter().all(|&m| m == 0);
    Ok(ChannelMask { mask, degenerate })
}

/// Logits of the teacher's upper half on `mask ⊙ z`, built on `g`.
pub fn masked_logits(g: &mut Graph, teacher: &Model, bound: &Bound, z: Var, layer_id: &str, mask: &ChannelMask) -> Result<Var> {
    let layer = teacher.layer_index(layer_id)?;
    let zm = mask_channels(g, z, &mask.as_f64());
    teacher.forward_from(g, bound, zm, layer, ForwardOpts::eval(), &mut Vec::new())
}

/// `softmax(f_{l+}(mask ⊙ Z))` with eval-mode BN.
pub fn nonrobust_predict(teacher: &Model, z: &Tensor, layer_id: &str, mask: &ChannelMask) -> Result<Tensor> {
    teacher.check_activation(z, layer_id)?;
    if mask.mask.len() != z.dim(1) {
        return Err(FerdError::Input(format!("mask has {} entries for {} channels", mask.mask.len(), z.dim(1))));
    }
    let mut g = Graph::new();
    let bound = teacher.bind(&mut g, false);
    let zv = g.constant(z.clone());
    let logits = masked_logits(&mut g, teacher, &bound, zv, layer_id, mask)?;
    Ok(g.value(logits).softmax_rows())
}

/// One row per channel: `channel, lambda_raw, lambda, mask`.
pub fn write_state_csv<W: Write>(w: W, state: &BottleneckState, mask: &ChannelMask) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["channel", "lambda_raw", "lambda", "mask"])?;
    for (c, (&r, l)) in state.lambda_raw.iter().zip(state.lambda()).enumerate() {
        out.write_record([c.to_string(), r.to_string(), l.to_string(), mask.mask[c].to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_model, Arch};

    fn setup() -> (Model, Tensor, Vec<usize>, String) {
        let m = build_model(Arch::TinyCnn, 3, [2, 8, 8], 3).unwrap();
        let x = rng::uniform_tensor(&mut rng::seeded(4), &[6, 2, 8, 8], 0.0, 1.0);
        let layer = m.last_conv_layer().unwrap();
        let z = probe(&m, &x, &layer).unwrap();
        (m, z, vec![0, 1, 2, 0, 1, 2], layer)
    }

    #[test]
    fn zero_noise_limit_and_seeding() {
        let (_, z, _, layer) = setup();
        let state = BottleneckState::new(&layer, z.dim(1), 0.01, -40.0);
        let zi = inject_noise(&z, &state, &mut rng::seeded(1)).unwrap();
        assert!(zi.max_abs_diff(&z) <= 1e-12);
        let s = BottleneckState::new(&layer, z.dim(1), 0.01, 0.0);
        assert_eq!(inject_noise(&z, &s, &mut rng::seeded(2)).unwrap(), inject_noise(&z, &s, &mut rng::seeded(2)).unwrap());
        let wrong = BottleneckState::new(&layer, z.dim(1) + 1, 0.01, 0.0);
        assert!(inject_noise(&z, &wrong, &mut rng::seeded(2)).is_err());
    }

    #[test]
    fn noise_law_matches_softplus_scale() {
        let z = Tensor::zeros(&[100, 2, 10, 10]);
        let state = BottleneckState { lambda_raw: vec![-1.0, 1.5], beta: 0.0, layer_id: "x".into() };
        let zi = inject_noise(&z, &state, &mut rng::seeded(9)).unwrap();
        let stds: Vec<f64> = channel_vars(&zi).iter().map(|v| v.sqrt()).collect();
        for (s, l) in stds.iter().zip(state.lambda()) {
            assert!((s / l - 1.0).abs() < 0.05, "{s} vs {l}");
        }
    }

    /// Noise draw `ε = w - Z/λ` with `w` standardized per channel, so that
    /// `Z_I = λ w` has variance exactly `λ²`.
    fn matching_noise(z: &Tensor, lambda: &[f64], seed: u64) -> Tensor {
        let w = rng::normal_tensor(&mut rng::seeded(seed), z.shape());
        let (means, vars) = (ferd_autograd::channel_means(&w), channel_vars(&w));
        let (c, hw) = (z.dim(1), z.dim(2) * z.dim(3));
        Tensor::from_fn(z.shape(), |i| {
            let ch = (i / hw) % c;
            (w.data()[i] - means[ch]) / vars[ch].sqrt() - z.data()[i] / lambda[ch]
        })
    }

    #[test]
    fn matched_variances_reduce_to_cross_entropy() {
        let (m, z, y, layer) = setup();
        let state = BottleneckState { lambda_raw: (0..z.dim(1)).map(|c| 0.1 * c as f64 - 1.0).collect(), beta: 0.5, layer_id: layer };
        let eps = matching_noise(&z, &state.lambda(), 5);
        let l = ib_loss_with_noise(&m, &z, &state, &y, &eps).unwrap();
        assert!(l.regularizer.abs() < 1e-9, "{}", l.regularizer);
        let b0 = BottleneckState { beta: 0.0, ..state.clone() };
        let l0 = ib_loss_with_noise(&m, &z, &b0, &y, &eps).unwrap();
        assert_eq!(l0.value, l0.ce);
    }

    #[test]
    fn optimize_zero_steps_and_determinism() {
        let (m, _, y, _) = setup();
        let x = rng::uniform_tensor(&mut rng::seeded(4), &[6, 2, 8, 8], 0.0, 1.0);
        let cfg = IbConfig { steps: 0, ..IbConfig::default() };
        let (s, trace) = optimize_lambda(&m, &x, &y, &cfg, &mut rng::seeded(0)).unwrap();
        assert!(trace.is_empty());
        assert!(s.lambda_raw.iter().all(|&r| r == 0.0));
        let cfg = IbConfig { steps: 5, ..IbConfig::default() };
        let a = optimize_lambda(&m, &x, &y, &cfg, &mut rng::seeded(1)).unwrap();
        let b = optimize_lambda(&m, &x, &y, &cfg, &mut rng::seeded(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_examples() {
        let mut zi = Tensor::zeros(&[2, 2, 1, 2]);
        // channel 0 values {-1, 1, -1, 1}: var 1; channel 1 {-2, 2, -2, 2}: var 4
        zi.data_mut().copy_from_slice(&[-1.0, 1.0, -2.0, 2.0, -1.0, 1.0, -2.0, 2.0]);
        let state = BottleneckState {
            lambda_raw: vec![inverse_softplus(0.1f64.sqrt()), inverse_softplus(5f64.sqrt())],
            beta: 0.0,
            layer_id: "x".into(),
        };
        let m = channel_mask(&state, &zi).unwrap();
        assert_eq!(m.mask, vec![1, 0]);
        assert!(!m.degenerate);
        let big = BottleneckState { lambda_raw: vec![100.0, 100.0], ..state.clone() };
        assert!(channel_mask(&big, &zi).unwrap().degenerate);
        let small = BottleneckState { lambda_raw: vec![-40.0, -40.0], ..state };
        assert_eq!(channel_mask(&small, &zi).unwrap().mask, vec![1, 1]);
    }

    #[test]
    fn masked_prediction_contracts() {
        let (m, z, _, layer) = setup();
        let all = nonrobust_predict(&m, &z, &layer, &ChannelMask::ones(z.dim(1))).unwrap();
        let plain = m.resume_from_layer(&z, &layer).unwrap().softmax_rows();
        assert!(all.max_abs_diff(&plain) < 1e-12);
        let none = ChannelMask { mask: vec![0; z.dim(1)], degenerate: true };
        let p = nonrobust_predict(&m, &z, &layer, &none).unwrap();
        assert!(p.is_finite());
        for i in 0..p.dim(0) {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn state_csv_has_one_row_per_channel() {
        let state = BottleneckState::new("block4", 3, 0.01, 0.0);
        let mut buf = Vec::new();
        write_state_csv(&mut buf, &state, &ChannelMask::ones(3)).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
