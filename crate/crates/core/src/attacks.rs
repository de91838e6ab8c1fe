//! L∞ gradient-sign attacks.
//!
//! Every attack runs the target model with eval-mode BatchNorm so that the
//! samples of a batch are attacked independently. All iterates are
//! projected onto the intersection of the ε-ball around the clean input and
//! the clip range.

use ferd_autograd::{Graph, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FerdError, Result};
use crate::losses::{cross_entropy, kl_rows, kl_uniform_rows};
use crate::model_zoo::{ForwardOpts, Model};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    /// L∞ budget in pixel units.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    /// Weight of the uniform-target term (UTAE only).
    pub gamma: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            gamma: 0.5,
            clip_min: 0.0,
            clip_max: 1.0,
            random_start: true,
            seed: 0,
        }
    }
}

impl AttackSpec {
    /// PGD with `steps` iterations at the default budget.
    pub fn pgd(steps: usize) -> Self {
        Self { steps, ..Self::default() }
    }

    /// Single full-budget step without random start.
    pub fn fgsm() -> Self {
        let d = Self::default();
        Self { steps: 1, alpha: d.epsilon, random_start: false, ..d }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(FerdError::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(FerdError::Config(format!("alpha must be > 0 when steps > 0, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(FerdError::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(FerdError::Config(format!("empty clip range [{}, {}]", self.clip_min, self.clip_max)));
        }
        Ok(())
    }
}

/// Sign with `sign(0) = 0` (including `-0.0`).
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `v` into `[x - ε, x + ε] ∩ [lo, hi]`.
fn project(v: f64, x: f64, spec: &AttackSpec) -> f64 {
    v.max(x - spec.epsilon).min(x + spec.epsilon).max(spec.clip_min).min(spec.clip_max)
}

enum Objective<'a> {
    CrossEntropy(&'a [usize]),
    CwMargin(&'a [usize]),
    Kl(&'a Tensor),
    Utae(&'a Tensor, f64),
}

fn input_gradient(model: &Model, x: &Tensor, objective: &Objective<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.param(x.clone());
    let (logits, _) = model.forward_graph(&mut g, &bound, xv, ForwardOpts::eval())?;
    let loss = match objective {
        Objective::CrossEntropy(labels) => cross_entropy(&mut g, logits, labels),
        Objective::CwMargin(labels) => {
            let m = g.cw_margin(logits, labels);
            g.sum(m)
        }
        Objective::Kl(clean) => {
            let p = g.constant((*clean).clone());
            let q = g.softmax(logits);
            kl_rows(&mut g, p, q)
        }
        Objective::Utae(clean, gamma) => {
            let p = g.constant((*clean).clone());
            let q = g.softmax(logits);
            let kl = kl_rows(&mut g, p, q);
            let ku = kl_uniform_rows(&mut g, q);
            let ku = g.scale(ku, *gamma);
            g.sub(kl, ku)
        }
    };
    let grads = g.backward(loss);
    Ok(grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn check_inputs(model: &Model, x: &Tensor, labels: Option<&[usize]>, spec: &AttackSpec) -> Result<()> {
    spec.validate()?;
    model.check_images(x)?;
    if let Some(y) = labels {
        if y.len() != x.dim(0) {
            return Err(FerdError::Input(format!("{} labels for a batch of {}", y.len(), x.dim(0))));
        }
        model.check_labels(y)?;
    }
    if x.data().iter().any(|&v| !(v >= spec.clip_min && v <= spec.clip_max)) {
        return Err(FerdError::Input(format!(
            "input lies outside the clip range [{}, {}]",
            spec.clip_min, spec.clip_max
        )));
    }
    Ok(())
}

/// Iterated sign-gradient steps (`direction` +1 ascends, -1 descends).
fn iterate(model: &Model, x: &Tensor, spec: &AttackSpec, objective: &Objective<'_>, direction: f64) -> Result<Tensor> {
    let mut adv = x.clone();
    if spec.random_start && spec.epsilon > 0.0 {
        let mut r = rng::seeded(spec.seed);
        for (a, &x0) in adv.data_mut().iter_mut().zip(x.data()) {
            let noise: f64 = r.random_range(-spec.epsilon..=spec.epsilon);
            *a = project(x0 + noise, x0, spec);
        }
    }
    for _ in 0..spec.steps {
        let grad = input_gradient(model, &adv, objective)?;
        for ((a, &gi), &x0) in adv.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            *a = project(*a + direction * spec.alpha * sign(gi), x0, spec);
        }
    }
    Ok(adv)
}

/// Fast gradient sign method: one ε-sized step up the cross-entropy.
/// A zero gradient leaves the input unchanged.
pub fn fgsm(model: &Model, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    check_inputs(model, x, Some(y), spec)?;
    let grad = input_gradient(model, x, &Objective::CrossEntropy(y))?;
    let mut adv = x.clone();
    for (a, &gi) in adv.data_mut().iter_mut().zip(grad.data()) {
        let x0 = *a;
        *a = project(x0 + spec.epsilon * sign(gi), x0, spec);
    }
    Ok(adv)
}

/// Projected gradient ascent on the cross-entropy.
pub fn pgd(model: &Model, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    check_inputs(model, x, Some(y), spec)?;
    iterate(model, x, spec, &Objective::CrossEntropy(y), 1.0)
}

/// L∞ Carlini-Wagner style attack: PGD on the margin `max_{j≠y} z_j - z_y`.
/// `spec.gamma` is ignored.
pub fn cw_inf(model: &Model, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    check_inputs(model, x, Some(y), spec)?;
    iterate(model, x, spec, &Objective::CwMargin(y), 1.0)
}

/// Targeted PGD: descend the cross-entropy towards `target`.
pub fn targeted_pgd(model: &Model, x: &Tensor, target: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    check_inputs(model, x, Some(target), spec)?;
    iterate(model, x, spec, &Objective::CrossEntropy(target), -1.0)
}

fn clean_probs(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (logits, _) = model.forward_graph(&mut g, &bound, xv, ForwardOpts::eval())?;
    Ok(g.value(logits).softmax_rows())
}

/// KL-divergence PGD: ascend `KL(f(x) || f(x^t))` around `x`.
pub fn kl_pgd(model: &Model, x: &Tensor, spec: &AttackSpec) -> Result<Tensor> {
    check_inputs(model, x, None, spec)?;
    let p = clean_probs(model, x)?;
    iterate(model, x, spec, &Objective::Kl(&p), 1.0)
}

/// Uniform-target adversarial examples: ascend
/// `KL(f(x_F) || f(x^t)) - γ · KL(U || f(x^t))` around the FAEs `x_F`.
pub fn utae(teacher: &Model, x_f: &Tensor, spec: &AttackSpec) -> Result<Tensor> {
    if spec.gamma < 0.0 {
        return Err(FerdError::Config(format!("UTAE gamma must be >= 0, got {}", spec.gamma)));
    }
    check_inputs(teacher, x_f, None, spec)?;
    let p = clean_probs(teacher, x_f)?;
    iterate(teacher, x_f, spec, &Objective::Utae(&p, spec.gamma), 1.0)
}

/// Attacks available to the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Clean,
    Fgsm,
    Pgd,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Clean, AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Cw];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Clean => "clean",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| FerdError::Config(format!("unknown attack `{name}` (expected clean, fgsm, pgd or cw)")))
    }

    /// Untargeted adversarial batch for this attack (`Clean` returns `x`).
    pub fn apply(self, model: &Model, x: &Tensor, y: &[usize], spec: &AttackSpec) -> Result<Tensor> {
        match self {
            AttackKind::Clean => Ok(x.clone()),
            AttackKind::Fgsm => fgsm(model, x, y, spec),
            AttackKind::Pgd => pgd(model, x, y, spec),
            AttackKind::Cw => cw_inf(model, x, y, spec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_model, Arch, Mode};

    fn setup(seed: u64) -> (Model, Tensor, Vec<usize>) {
        let mut m = build_model(Arch::TinyCnn, 3, [2, 8, 8], seed).unwrap();
        m.set_mode(Mode::Eval);
        let x = rng::uniform_tensor(&mut rng::seeded(seed + 100), &[4, 2, 8, 8], 0.0, 1.0);
        (m, x, vec![0, 1, 2, 1])
    }

    fn assert_in_ball(adv: &Tensor, x: &Tensor, spec: &AttackSpec) {
        for (&a, &b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= spec.epsilon + 1e-6);
            assert!(a >= spec.clip_min && a <= spec.clip_max);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let (m, x, y) = setup(1);
        let spec = AttackSpec { epsilon: 0.0, ..AttackSpec::default() };
        assert_eq!(fgsm(&m, &x, &y, &AttackSpec { epsilon: 0.0, ..AttackSpec::fgsm() }).unwrap(), x);
        assert_eq!(pgd(&m, &x, &y, &spec).unwrap(), x);
        assert_eq!(targeted_pgd(&m, &x, &[2, 2, 2, 2], &spec).unwrap(), x);
        assert_eq!(utae(&m, &x, &spec).unwrap(), x);
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let (m, x, y) = setup(2);
        let spec = AttackSpec::fgsm();
        assert_eq!(fgsm(&m, &x, &y, &spec).unwrap(), pgd(&m, &x, &y, &spec).unwrap());
    }

    #[test]
    fn steps_zero_keeps_random_start_inside_ball() {
        let (m, x, y) = setup(3);
        let spec = AttackSpec { steps: 0, ..AttackSpec::default() };
        let adv = pgd(&m, &x, &y, &spec).unwrap();
        assert_in_ball(&adv, &x, &spec);
        let no_start = AttackSpec { random_start: false, ..spec };
        assert_eq!(pgd(&m, &x, &y, &no_start).unwrap(), x);
    }

    #[test]
    fn all_attacks_respect_the_ball() {
        let (m, x, y) = setup(4);
        let spec = AttackSpec::pgd(5);
        for adv in [
            fgsm(&m, &x, &y, &AttackSpec::fgsm()).unwrap(),
            pgd(&m, &x, &y, &spec).unwrap(),
            cw_inf(&m, &x, &y, &spec).unwrap(),
            targeted_pgd(&m, &x, &[1, 1, 1, 1], &spec).unwrap(),
            kl_pgd(&m, &x, &spec).unwrap(),
            utae(&m, &x, &spec).unwrap(),
        ] {
            assert_in_ball(&adv, &x, &spec);
        }
    }

    #[test]
    fn cw_ignores_gamma() {
        let (m, x, y) = setup(5);
        let a = cw_inf(&m, &x, &y, &AttackSpec { gamma: 0.0, ..AttackSpec::pgd(3) }).unwrap();
        let b = cw_inf(&m, &x, &y, &AttackSpec { gamma: 7.0, ..AttackSpec::pgd(3) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn utae_with_zero_gamma_is_kl_pgd() {
        let (m, x, _) = setup(6);
        let spec = AttackSpec { gamma: 0.0, ..AttackSpec::pgd(4) };
        assert_eq!(utae(&m, &x, &spec).unwrap(), kl_pgd(&m, &x, &spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let (m, x, y) = setup(7);
        let neg_gamma = AttackSpec { gamma: -0.1, ..AttackSpec::default() };
        assert!(matches!(utae(&m, &x, &neg_gamma), Err(FerdError::Config(_))));
        let zero_alpha = AttackSpec { alpha: 0.0, ..AttackSpec::default() };
        assert!(matches!(pgd(&m, &x, &y, &zero_alpha), Err(FerdError::Config(_))));
        let out_of_range = x.map(|v| v + 2.0);
        assert!(matches!(pgd(&m, &out_of_range, &y, &AttackSpec::default()), Err(FerdError::Input(_))));
        assert!(matches!(pgd(&m, &x, &[0, 1], &AttackSpec::default()), Err(FerdError::Input(_))));
    }

    #[test]
    fn attack_kind_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(AttackKind::parse(k.name()).unwrap(), k);
        }
        assert!(AttackKind::parse("aa").is_err());
    }
}
