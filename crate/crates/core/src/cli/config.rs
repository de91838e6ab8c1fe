//! Run configuration: built-in profiles, TOML overlay and CLI overrides.
//!
//! Resolution order (later wins): documented defaults, `--profile`, the
//! `--config` file, command-line flags. Unknown keys are rejected with the
//! key named in the message.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec};
use crate::data::{DataSource, SyntheticSpec};
use crate::distill::{Ablation, DistillConfig};
use crate::error::{FerdError, Result};
use crate::generator::GeneratorHyper;
use crate::model_zoo::{Arch, TeacherTrainConfig};
use crate::nonrobust_ib::IbConfig;
use crate::optim::{AdamConfig, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Tiny models on 4-class synthetic data; runs in minutes on one core.
    Desk,
    /// Full-scale settings, meant for external execution.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `synthetic:<key=value,...>` or a directory of CIFAR-style batches.
    pub source: String,
    /// Evaluate on at most this many test samples per class (all when 0).
    pub eval_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { source: "data/cifar-10-batches-bin".into(), eval_per_class: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub lambda_adv: f64,
    pub lambda_bn: f64,
    pub lambda_oh: f64,
    pub lambda_uni: f64,
    pub adv_sign: f64,
    pub optimizer: AdamConfig,
    pub ib: IbConfig,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let h = GeneratorHyper::default();
        Self {
            lambda_adv: h.lambda_adv,
            lambda_bn: h.lambda_bn,
            lambda_oh: h.lambda_oh,
            lambda_uni: h.lambda_uni,
            adv_sign: h.adv_sign,
            optimizer: AdamConfig::default(),
            ib: IbConfig::default(),
        }
    }
}

impl GeneratorSection {
    pub fn hyper(&self) -> GeneratorHyper {
        GeneratorHyper {
            lambda_adv: self.lambda_adv,
            lambda_bn: self.lambda_bn,
            lambda_oh: self.lambda_oh,
            lambda_uni: self.lambda_uni,
            adv_sign: self.adv_sign,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// Teacher checkpoint; `{out}/teacher/teacher.ckpt` when empty.
    pub teacher: String,
    pub epochs: usize,
    pub gen_iters: usize,
    pub student_iters: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    pub reweight_batch: usize,
    pub student_arch: Arch,
    pub optimizer: SgdConfig,
    pub no_reweight: bool,
    pub no_fae: bool,
    pub no_utae: bool,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            teacher: String::new(),
            epochs: d.epochs,
            gen_iters: d.gen_iters,
            student_iters: d.student_iters,
            batch_size: d.batch_size,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            temperature: d.temperature,
            reweight_batch: d.reweight_batch,
            student_arch: d.student_arch,
            optimizer: d.student_optimizer,
            no_reweight: false,
            no_fae: false,
            no_utae: false,
            checkpoint_every: d.checkpoint_every,
            eval_every: d.eval_every,
        }
    }
}

/// Named attack settings, `[attack.<name>]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// Teacher adversarial training.
    pub train: AttackSpec,
    /// Uniform-target examples for the student (`gamma` applies here).
    pub utae: AttackSpec,
    /// Margin measurement for class reweighting.
    pub reweight: AttackSpec,
    pub fgsm: AttackSpec,
    pub pgd: AttackSpec,
    pub cw: AttackSpec,
    pub targeted: AttackSpec,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            train: AttackSpec::pgd(10),
            utae: AttackSpec::pgd(10),
            reweight: AttackSpec::pgd(20),
            fgsm: AttackSpec::fgsm(),
            pgd: AttackSpec::pgd(20),
            cw: AttackSpec::pgd(30),
            targeted: AttackSpec::pgd(20),
        }
    }
}

impl AttackSection {
    pub fn for_kind(&self, kind: AttackKind) -> AttackSpec {
        match kind {
            AttackKind::Clean => AttackSpec { steps: 0, epsilon: 0.0, random_start: false, ..AttackSpec::default() },
            AttackKind::Fgsm => self.fgsm.clone(),
            AttackKind::Pgd => self.pgd.clone(),
            AttackKind::Cw => self.cw.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub attacks: Vec<String>,
    pub worst_k_percent: f64,
    pub batch_size: usize,
    /// Also compute the source-by-target success matrix.
    pub targeted: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            attacks: AttackKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            worst_k_percent: 10.0,
            batch_size: 256,
            targeted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub root: String,
    /// Subdirectory for this run; the command name when empty.
    pub run_id: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { root: "runs".into(), run_id: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub generator: GeneratorSection,
    pub distill: DistillSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            teacher: TeacherSection::default(),
            generator: GeneratorSection::default(),
            distill: DistillSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub eval_samples: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherTrainConfig::default();
        Self { arch: Arch::ResnetSmall, epochs: 100, batch_size: 128, optimizer: t.optimizer, eval_samples: t.eval_samples }
    }
}

/// The desk synthetic dataset: 4 classes of 8x8 RGB images, hard enough
/// that a robust teacher keeps a visible gap between classes.
pub fn desk_data() -> SyntheticSpec {
    SyntheticSpec { classes: 4, size: 8, train: 256, test: 128, contrast: 0.1, noise: 0.15, overlap: 0.7, ..SyntheticSpec::default() }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => RunConfig::default(),
            Profile::Desk => {
                let mut c = RunConfig::default();
                c.data.source = desk_data().to_string();
                c.teacher = TeacherSection { arch: Arch::TinyCnn, epochs: 10, batch_size: 64, ..TeacherSection::default() };
                c.generator.ib.steps = 10;
                // Keeps lambda_uni / C at the full-scale ratio (5 / 10).
                c.generator.lambda_uni = 2.0;
                c.distill = DistillSection {
                    epochs: 10,
                    gen_iters: 20,
                    student_iters: 60,
                    batch_size: 64,
                    reweight_batch: 64,
                    student_arch: Arch::TinyCnn,
                    ..DistillSection::default()
                };
                c.attack.utae = AttackSpec::pgd(5);
                c.attack.reweight = AttackSpec::pgd(10);
                c.attack.pgd = AttackSpec::pgd(10);
                c.attack.cw = AttackSpec::pgd(10);
                c.attack.targeted = AttackSpec::pgd(10);
                c.eval.batch_size = 128;
                c
            }
        }
    }

    /// Resolve `base` overlaid with the TOML document `text`.
    pub fn overlay(base: &RunConfig, text: &str) -> Result<RunConfig> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| FerdError::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| FerdError::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| FerdError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(profile: Option<Profile>, path: Option<&Path>) -> Result<RunConfig> {
        let base = RunConfig::profile(profile.unwrap_or(Profile::Paper));
        match path {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => FerdError::Config(format!("config file {} not found", p.display())),
                    _ => FerdError::Io(e),
                })?;
                RunConfig::overlay(&base, &text)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn data_source(&self) -> Result<DataSource> {
        DataSource::parse(&self.data.source)
    }

    pub fn teacher_config(&self) -> TeacherTrainConfig {
        TeacherTrainConfig {
            arch: self.teacher.arch,
            epochs: self.teacher.epochs,
            batch_size: self.teacher.batch_size,
            attack: self.attack.train.clone(),
            optimizer: self.teacher.optimizer.clone(),
            eval_samples: self.teacher.eval_samples,
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            epochs: d.epochs,
            gen_iters: d.gen_iters,
            student_iters: d.student_iters,
            batch_size: d.batch_size,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            temperature: d.temperature,
            reweight_batch: d.reweight_batch,
            utae: self.attack.utae.clone(),
            reweight_attack: self.attack.reweight.clone(),
            generator: self.generator.hyper(),
            ib: self.generator.ib.clone(),
            generator_optimizer: self.generator.optimizer.clone(),
            student_optimizer: d.optimizer.clone(),
            student_arch: d.student_arch,
            ablation: Ablation { no_reweight: d.no_reweight, no_fae: d.no_fae, no_utae: d.no_utae },
            checkpoint_every: d.checkpoint_every,
            eval_every: d.eval_every,
            eval_attack: self.attack.pgd.clone(),
            seed: self.seed,
        }
    }

    pub fn eval_attacks(&self) -> Result<Vec<(AttackKind, AttackSpec)>> {
        if self.eval.attacks.is_empty() {
            return Err(FerdError::Config("eval.attacks must name at least one attack".into()));
        }
        self.eval
            .attacks
            .iter()
            .map(|name| {
                let kind = AttackKind::parse(name).map_err(|_| FerdError::Config(format!("eval.attacks: unknown attack `{name}`")))?;
                let spec = self.attack.for_kind(kind).with_seed(self.seed);
                Ok((kind, spec))
            })
            .collect()
    }

    pub fn output_root(&self) -> PathBuf {
        PathBuf::from(&self.output.root)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
