//! The alternating generator / reweight / student training loop.
//!
//! Every epoch runs three phases in order:
//!
//! 1. `gen_iters` generator steps on labels drawn from the current class
//!    weights;
//! 2. a reweighting pass: a class-balanced synthetic batch is attacked with
//!    PGD on the teacher, its adversarial margins give per-class
//!    vulnerabilities and the softmax of those becomes the new weights;
//! 3. `student_iters` student steps on freshly synthesized samples `x_F`
//!    and their uniform-target adversarial versions `x_U`, minimizing
//!    `λ1·KL(T(x_F) || S(x_F)) + λ2·KL(T(x_F) || S(x_U))`.
//!
//! All randomness of an epoch comes from streams derived from
//! `(seed, epoch)`, so a run resumed from an epoch checkpoint replays the
//! remaining epochs exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ferd_autograd::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::attacks::{kl_pgd, pgd, utae, AttackKind, AttackSpec};
use crate::data::Dataset;
use crate::error::{format_err, FerdError, Result};
use crate::eval::{per_class_accuracy, worst_class};
use crate::fairness_reweight::{batch_margins, class_vulnerability, sample_labels, sampling_weights, ClassSamplingWeights, ClassVulnerability};
use crate::generator::{generator_step, synthesize, GeneratorHyper};
use crate::losses::{check_prob_rows, kl_mean, kl_rows};
use crate::model_zoo::checkpoint::{read_str, read_tensor, read_u32, write_str, write_tensor};
use crate::model_zoo::{build_model, load_checkpoint, save_checkpoint, Arch, ForwardOpts, Mode, Model};
use crate::nonrobust_ib::IbConfig;
use crate::optim::{collect_grads, cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};
use crate::rng;

/// Which fairness mechanisms to switch off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Keep class weights uniform.
    pub no_reweight: bool,
    /// Drop the uniformity loss on non-robust features (`λ_uni = 0`).
    pub no_fae: bool,
    /// Replace UTAE by a plain KL-PGD attack (`γ = 0`).
    pub no_utae: bool,
}

impl Ablation {
    pub fn is_full(self) -> bool {
        self == Ablation::default()
    }

    pub fn arm_name(self) -> String {
        let mut parts = Vec::new();
        if self.no_reweight {
            parts.push("no_reweight");
        }
        if self.no_fae {
            parts.push("no_fae");
        }
        if self.no_utae {
            parts.push("no_utae");
        }
        if parts.is_empty() {
            "ferd".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub gen_iters: usize,
    pub student_iters: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Softmax temperature of the class weights.
    pub temperature: f64,
    /// Samples in the reweighting batch (class-balanced).
    pub reweight_batch: usize,
    /// Attack used to build `x_U` (its `gamma` is the uniform-target weight).
    pub utae: AttackSpec,
    /// Attack used to measure adversarial margins for reweighting.
    pub reweight_attack: AttackSpec,
    pub generator: GeneratorHyper,
    pub ib: IbConfig,
    pub generator_optimizer: AdamConfig,
    pub student_optimizer: SgdConfig,
    pub student_arch: Arch,
    pub ablation: Ablation,
    /// Write checkpoints every n epochs (0: only at the end when an output
    /// directory is given).
    pub checkpoint_every: usize,
    /// Evaluate the student on the held-out set every n epochs (0: never).
    pub eval_every: usize,
    /// Attack for the per-epoch robust snapshot.
    pub eval_attack: AttackSpec,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 220,
            gen_iters: 400,
            student_iters: 400,
            batch_size: 256,
            lambda1: 5.0 / 6.0,
            lambda2: 1.0 / 6.0,
            temperature: 1.0,
            reweight_batch: 256,
            utae: AttackSpec::pgd(10),
            reweight_attack: AttackSpec::pgd(20),
            generator: GeneratorHyper::default(),
            ib: IbConfig::default(),
            generator_optimizer: AdamConfig::default(),
            student_optimizer: SgdConfig::default(),
            student_arch: Arch::ResnetSmall,
            ablation: Ablation::default(),
            checkpoint_every: 0,
            eval_every: 0,
            eval_attack: AttackSpec::pgd(10),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FerdError::Config(format!("distill.{k} must be finite and >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 || self.reweight_batch == 0 {
            return Err(FerdError::Config("distill.batch_size and distill.reweight_batch must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FerdError::Config(format!("distill.temperature must be > 0, got {}", self.temperature)));
        }
        if !self.student_arch.is_classifier() {
            return Err(FerdError::Config(format!("distill.student_arch must be a classifier, got {}", self.student_arch)));
        }
        self.utae.validate()?;
        self.reweight_attack.validate()?;
        self.eval_attack.validate()?;
        self.generator.validate()
    }

    /// Generator weights with the ablation applied.
    pub fn effective_generator(&self) -> GeneratorHyper {
        let mut h = self.generator.clone();
        if self.ablation.no_fae {
            h.lambda_uni = 0.0;
        }
        h
    }
}

/// `λ1·KL(T(x_F) || S(x_F)) + λ2·KL(T(x_F) || S(x_U))`, batch means.
pub fn student_loss(t_xf: &Tensor, s_xf: &Tensor, s_xu: &Tensor, lambda1: f64, lambda2: f64) -> Result<f64> {
    check_prob_rows(t_xf, "teacher probabilities")?;
    Ok(lambda1 * kl_mean(t_xf, s_xf)? + lambda2 * kl_mean(t_xf, s_xu)?)
}

/// One line of the history CSV. Cells that do not apply to a phase stay
/// empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: String,
    pub step: usize,
    pub l_adv: Option<f64>,
    pub l_bn: Option<f64>,
    pub l_oh: Option<f64>,
    pub l_uni: Option<f64>,
    pub l_gen: Option<f64>,
    pub masked_channels: Option<usize>,
    pub l_stu: Option<f64>,
    pub class: Option<usize>,
    pub d_c: Option<f64>,
    pub p_c: Option<f64>,
    pub clean_avg: Option<f64>,
    pub clean_worst: Option<f64>,
    pub robust_avg: Option<f64>,
    pub robust_worst: Option<f64>,
}

pub const HISTORY_COLUMNS: [&str; 17] = [
    "epoch", "phase", "step", "l_adv", "l_bn", "l_oh", "l_uni", "l_gen", "masked_channels", "l_stu", "class", "d_c", "p_c",
    "clean_avg", "clean_worst", "robust_avg", "robust_worst",
];

pub const PHASES: [&str; 4] = ["generator", "reweight", "student", "eval"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Class weights in force after each epoch's reweighting phase.
    pub fn weights_by_epoch(&self) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.phase == "reweight") {
            match out.last_mut() {
                Some((e, p)) if *e == r.epoch => p.push(r.p_c.unwrap_or(f64::NAN)),
                _ => out.push((r.epoch, vec![r.p_c.unwrap_or(f64::NAN)])),
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            out.write_record(HISTORY_COLUMNS)?;
        }
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != HISTORY_COLUMNS {
            return Err(FerdError::Schema {
                field: "history.header".into(),
                detail: format!("expected {}", HISTORY_COLUMNS.join(",")),
            });
        }
        let rows = rdr
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| FerdError::Schema { field: format!("history row {i}"), detail: e.to_string() }))
            .collect::<Result<Vec<HistoryRow>>>()?;
        let h = History { rows };
        h.validate()?;
        Ok(h)
    }

    /// Phase names, epoch ordering, finiteness and the class-weight simplex.
    pub fn validate(&self) -> Result<()> {
        let bad = |i: usize, d: String| FerdError::Schema { field: format!("history row {i}"), detail: d };
        let mut last_epoch = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if !PHASES.contains(&r.phase.as_str()) {
                return Err(bad(i, format!("unknown phase `{}`", r.phase)));
            }
            if r.epoch < last_epoch {
                return Err(bad(i, "epochs are not non-decreasing".into()));
            }
            last_epoch = r.epoch;
            let floats = [r.l_adv, r.l_bn, r.l_oh, r.l_uni, r.l_gen, r.l_stu, r.d_c, r.p_c, r.clean_avg, r.clean_worst, r.robust_avg, r.robust_worst];
            if floats.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad(i, "non-finite value".into()));
            }
            let required = match r.phase.as_str() {
                "generator" => r.l_gen.is_some() && r.l_adv.is_some() && r.l_bn.is_some() && r.l_oh.is_some() && r.l_uni.is_some(),
                "reweight" => r.p_c.is_some() && r.class.is_some(),
                "student" => r.l_stu.is_some(),
                _ => r.clean_avg.is_some(),
            };
            if !required {
                return Err(bad(i, format!("missing values for phase {}", r.phase)));
            }
        }
        for (e, p) in self.weights_by_epoch() {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
                return Err(FerdError::Schema { field: format!("history epoch {e} p_c"), detail: format!("weights sum to {s}") });
            }
        }
        Ok(())
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    /// `{out_root}/{run_id}`.
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(root: impl AsRef<Path>, run_id: &str) -> Self {
        Self { dir: root.as_ref().join(run_id) }
    }

    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn weights_path(&self) -> PathBuf {
        self.dir.join("class_weights.csv")
    }

    pub fn student_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.ckpt"))
    }

    pub fn generator_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.generator.ckpt"))
    }

    pub fn state_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.state"))
    }

    pub fn final_student(&self) -> PathBuf {
        self.dir.join("student.ckpt")
    }
}

/// Trainer state that is not part of either model.
#[derive(Clone, Debug)]
struct LoopState {
    weights: ClassSamplingWeights,
    sgd_velocity: Vec<Tensor>,
    adam_t: u64,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
}

const STATE_MAGIC: &[u8; 8] = b"FERDSTAT";

fn write_state(path: &Path, s: &LoopState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATE_MAGIC)?;
    w.write_u32::<LittleEndian>(s.weights.p.len() as u32)?;
    for &p in &s.weights.p {
        w.write_f64::<LittleEndian>(p)?;
    }
    w.write_f64::<LittleEndian>(s.weights.temperature)?;
    w.write_u64::<LittleEndian>(s.adam_t)?;
    for (tag, list) in [("sgd_velocity", &s.sgd_velocity), ("adam_m", &s.adam_m), ("adam_v", &s.adam_v)] {
        write_str(&mut w, tag)?;
        w.write_u32::<LittleEndian>(list.len() as u32)?;
        for (i, t) in list.iter().enumerate() {
            write_tensor(&mut w, &format!("{tag}[{i}]"), t)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_state(path: &Path) -> Result<LoopState> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FerdError::MissingFile(path.to_path_buf()),
        _ => FerdError::Io(e),
    })?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| format_err("state.magic", "truncated"))?;
    if &magic != STATE_MAGIC {
        return Err(format_err("state.magic", "not a trainer state file"));
    }
    let c = read_u32(&mut r, "state.num_classes")? as usize;
    let mut p = vec![0.0; c];
    r.read_f64_into::<LittleEndian>(&mut p).map_err(|_| format_err("state.weights", "truncated"))?;
    let temperature = r.read_f64::<LittleEndian>().map_err(|_| format_err("state.temperature", "truncated"))?;
    let adam_t = r.read_u64::<LittleEndian>().map_err(|_| format_err("state.adam_t", "truncated"))?;
    let mut lists = Vec::new();
    for tag in ["sgd_velocity", "adam_m", "adam_v"] {
        let found = read_str(&mut r, "state.section")?;
        if found != tag {
            return Err(format_err("state.section", format!("expected {tag}, found {found}")));
        }
        let n = read_u32(&mut r, &format!("state.{tag}.count"))? as usize;
        let mut list = Vec::with_capacity(n);
        for i in 0..n {
            list.push(read_tensor(&mut r, &format!("state.{tag}[{i}]"))?.1);
        }
        lists.push(list);
    }
    let adam_v = lists.pop().expect("three sections");
    let adam_m = lists.pop().expect("three sections");
    let sgd_velocity = lists.pop().expect("three sections");
    Ok(LoopState { weights: ClassSamplingWeights { p, temperature }, sgd_velocity, adam_t, adam_m, adam_v })
}

fn tag_err(e: FerdError, epoch: usize, phase: &str, step: usize) -> FerdError {
    match e {
        FerdError::Numerical(m) => FerdError::Numerical(format!("epoch {epoch}, {phase} step {step}: {m}")),
        other => other,
    }
}

/// Stream tags for the per-epoch random streams.
const TAG_GEN: u64 = 1;
const TAG_REWEIGHT: u64 = 2;
const TAG_STUDENT: u64 = 3;
const TAG_EVAL: u64 = 4;

fn probs(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (logits, _) = model.forward_graph(&mut g, &b, xv, ForwardOpts::eval())?;
    Ok(g.value(logits).softmax_rows())
}

/// Adversarial margins of the teacher on a class-balanced synthetic batch.
fn reweight(teacher: &Model, generator: &Model, cfg: &DistillConfig, epoch: usize) -> Result<(ClassVulnerability, ClassSamplingWeights)> {
    let c = teacher.num_classes();
    let labels: Vec<usize> = (0..cfg.reweight_batch).map(|i| i % c).collect();
    let mut r = rng::derive(cfg.seed, &[TAG_REWEIGHT, epoch as u64]);
    let batch = synthesize(generator, &labels, &mut r)?;
    let spec = cfg.reweight_attack.clone().with_seed(rng::derive_seed(cfg.seed, &[TAG_REWEIGHT, epoch as u64, 1]));
    let adv = pgd(teacher, &batch.images, &labels, &spec)?;
    let margins = batch_margins(&probs(teacher, &adv)?, &labels)?;
    let v = class_vulnerability(&margins, &labels, c)?;
    let w = sampling_weights(&v.d, cfg.temperature)?;
    Ok((v, w))
}

/// One student update on `x_F` and its adversarial counterpart.
fn student_step(
    student: &mut Model,
    opt: &mut Sgd,
    teacher: &Model,
    x_f: &Tensor,
    cfg: &DistillConfig,
    attack_seed: u64,
) -> Result<f64> {
    let t_xf = probs(teacher, x_f)?;
    let x_u = if cfg.ablation.no_utae {
        kl_pgd(teacher, x_f, &AttackSpec { gamma: 0.0, seed: attack_seed, ..cfg.utae.clone() })?
    } else {
        utae(teacher, x_f, &cfg.utae.clone().with_seed(attack_seed))?
    };
    student.set_mode(Mode::Train);
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let xf = g.constant(x_f.clone());
    let xu = g.constant(x_u);
    let (lf, taps_f) = student.forward_graph(&mut g, &bound, xf, ForwardOpts::train())?;
    let (lu, taps_u) = student.forward_graph(&mut g, &bound, xu, ForwardOpts::train())?;
    let tp = g.constant(t_xf);
    let sf = g.softmax(lf);
    let su = g.softmax(lu);
    let kf = kl_rows(&mut g, tp, sf);
    let ku = kl_rows(&mut g, tp, su);
    let a = g.scale(kf, cfg.lambda1);
    let b = g.scale(ku, cfg.lambda2);
    let loss = g.add(a, b);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(FerdError::Numerical(format!("student loss is {value}")));
    }
    let grads = g.backward(loss);
    opt.step(student, &collect_grads(&grads, &bound))?;
    student.commit_bn_stats(&g, &taps_f);
    student.commit_bn_stats(&g, &taps_u);
    student.set_mode(Mode::Eval);
    Ok(value)
}

/// Everything a run needs besides the teacher.
pub struct RunContext<'a> {
    pub eval_set: Option<&'a Dataset>,
    pub output: Option<RunOutput>,
    /// Continue from the checkpoint written after this many epochs.
    pub resume_from: Option<usize>,
}

impl RunContext<'_> {
    pub fn none() -> Self {
        Self { eval_set: None, output: None, resume_from: None }
    }
}

/// Full FERD distillation (or an ablation arm, per `cfg.ablation`).
/// Returns the student in eval mode and the training history.
pub fn run_ferd(teacher: &Model, cfg: &DistillConfig) -> Result<(Model, History)> {
    run_with(teacher, cfg, &RunContext::none())
}

/// Distillation with some fairness mechanisms disabled.
pub fn run_baseline(teacher: &Model, cfg: &DistillConfig, ablation: Ablation) -> Result<(Model, History)> {
    run_with(teacher, &DistillConfig { ablation, ..cfg.clone() }, &RunContext::none())
}

pub fn run_with(teacher: &Model, cfg: &DistillConfig, ctx: &RunContext<'_>) -> Result<(Model, History)> {
    cfg.validate()?;
    if !teacher.arch().is_classifier() {
        return Err(FerdError::Config("teacher must be a classifier".into()));
    }
    let mut teacher = teacher.clone();
    teacher.set_mode(Mode::Eval);
    let teacher = &teacher;
    let c = teacher.num_classes();
    let shape = teacher.input_shape();
    if let Some(ev) = ctx.eval_set {
        teacher.expect_classes(ev.num_classes)?;
    }

    let mut student = build_model(cfg.student_arch, c, shape, rng::derive_seed(cfg.seed, &[0x5354]))?;
    student.set_mode(Mode::Eval);
    let mut generator = build_model(Arch::GeneratorCond, c, shape, rng::derive_seed(cfg.seed, &[0x4745]))?;
    let mut sgd = Sgd::new(&student, cfg.student_optimizer.clone());
    let mut adam = Adam::new(&generator, cfg.generator_optimizer.clone());
    let mut weights = ClassSamplingWeights { p: vec![1.0 / c as f64; c], temperature: cfg.temperature };
    let mut history = History::default();
    let mut weight_rows: Vec<(usize, ClassVulnerability, ClassSamplingWeights)> = Vec::new();
    let hyper = cfg.effective_generator();

    let mut start = 0;
    if let Some(e) = ctx.resume_from {
        let out = ctx
            .output
            .as_ref()
            .ok_or_else(|| FerdError::Config("resuming needs an output directory".into()))?;
        student = load_checkpoint(out.student_checkpoint(e))?;
        student.expect_classes(c)?;
        student.set_mode(Mode::Eval);
        generator = load_checkpoint(out.generator_checkpoint(e))?;
        let st = read_state(&out.state_path(e))?;
        sgd.load_state(st.sgd_velocity)?;
        adam.load_state(st.adam_t, st.adam_m, st.adam_v)?;
        weights = st.weights;
        let prev = History::read_csv(File::open(out.history_path())?)?;
        history.rows = prev.rows.into_iter().filter(|r| r.epoch < e).collect();
        start = e;
        log::info!("resuming from epoch {e}");
    }
    if let Some(out) = &ctx.output {
        std::fs::create_dir_all(&out.dir)?;
    }

    for epoch in start..cfg.epochs {
        let lr = cosine_lr(cfg.student_optimizer.lr, epoch, cfg.epochs);
        sgd.set_lr(lr);

        // Phase 1: generator.
        let mut gen_rng = rng::derive(cfg.seed, &[TAG_GEN, epoch as u64]);
        for step in 0..cfg.gen_iters {
            let labels = sample_labels(&weights, cfg.batch_size, &mut gen_rng);
            let l = generator_step(&mut generator, &mut adam, teacher, &student, &labels, &hyper, &cfg.ib, &mut gen_rng)
                .map_err(|e| tag_err(e, epoch, "generator", step))?;
            history.rows.push(HistoryRow {
                epoch,
                phase: "generator".into(),
                step,
                l_adv: Some(l.l_adv),
                l_bn: Some(l.l_bn),
                l_oh: Some(l.l_oh),
                l_uni: Some(l.l_uni),
                l_gen: Some(l.l_gen),
                masked_channels: Some(l.mask.count()),
                ..HistoryRow::default()
            });
        }

        // Phase 2: class weights.
        let d = if cfg.ablation.no_reweight {
            weights = ClassSamplingWeights { p: vec![1.0 / c as f64; c], temperature: cfg.temperature };
            None
        } else {
            let (v, w) = reweight(teacher, &generator, cfg, epoch).map_err(|e| tag_err(e, epoch, "reweight", 0))?;
            weights = w;
            Some(v)
        };
        for class in 0..c {
            history.rows.push(HistoryRow {
                epoch,
                phase: "reweight".into(),
                step: class,
                class: Some(class),
                d_c: d.as_ref().map(|v| v.d[class]),
                p_c: Some(weights.p[class]),
                ..HistoryRow::default()
            });
        }
        if let Some(v) = d {
            log::info!("epoch {epoch}: class weights {:?}", weights.p);
            weight_rows.push((epoch, v, weights.clone()));
        }

        // Phase 3: student.
        let mut stu_rng = rng::derive(cfg.seed, &[TAG_STUDENT, epoch as u64]);
        for step in 0..cfg.student_iters {
            let labels = sample_labels(&weights, cfg.batch_size, &mut stu_rng);
            let batch = synthesize(&generator, &labels, &mut stu_rng).map_err(|e| tag_err(e, epoch, "student", step))?;
            let seed = rng::derive_seed(cfg.seed, &[TAG_STUDENT, epoch as u64, step as u64]);
            let l = student_step(&mut student, &mut sgd, teacher, &batch.images, cfg, seed)
                .map_err(|e| tag_err(e, epoch, "student", step))?;
            history.rows.push(HistoryRow { epoch, phase: "student".into(), step, l_stu: Some(l), ..HistoryRow::default() });
        }

        // Phase 4: optional held-out snapshot.
        if let Some(ev) = ctx.eval_set.filter(|_| cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            let clean = per_class_accuracy(&student, ev, None, 256)?;
            let spec = cfg.eval_attack.clone().with_seed(rng::derive_seed(cfg.seed, &[TAG_EVAL, epoch as u64]));
            let robust = per_class_accuracy(&student, ev, Some((AttackKind::Pgd, &spec)), 256)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            history.rows.push(HistoryRow {
                epoch,
                phase: "eval".into(),
                step: 0,
                clean_avg: Some(mean(&clean)),
                clean_worst: Some(worst_class(&clean)?),
                robust_avg: Some(mean(&robust)),
                robust_worst: Some(worst_class(&robust)?),
                ..HistoryRow::default()
            });
            log::info!("epoch {epoch}: student clean {:.3} robust {:.3}", mean(&clean), mean(&robust));
        }

        if let Some(out) = &ctx.output {
            let done = epoch + 1;
            let due = (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.epochs;
            history.write_csv(BufWriter::new(File::create(out.history_path())?))?;
            if due {
                save_checkpoint(&student, out.student_checkpoint(done))?;
                save_checkpoint(&generator, out.generator_checkpoint(done))?;
                let (t, m, v) = adam.state();
                write_state(
                    &out.state_path(done),
                    &LoopState {
                        weights: weights.clone(),
                        sgd_velocity: sgd.state().to_vec(),
                        adam_t: t,
                        adam_m: m.to_vec(),
                        adam_v: v.to_vec(),
                    },
                )?;
            }
        }
    }

    if let Some(out) = &ctx.output {
        history.write_csv(BufWriter::new(File::create(out.history_path())?))?;
        crate::fairness_reweight::write_weights_csv(BufWriter::new(File::create(out.weights_path())?), true, &weight_rows)?;
        save_checkpoint(&student, out.final_student())?;
    }
    student.set_mode(Mode::Eval);
    Ok((student, history))
}
