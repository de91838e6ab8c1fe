//! Command-line entry point.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime failure (I/O, numerical divergence, bad data) |
//! | 2 | usage or configuration error; the message names the offending key |
//! | 3 | a required checkpoint (e.g. the teacher) does not exist |
//! | 4 | a checkpoint exists but cannot be decoded |
//!
//! Artifacts go to `{root}/{run_id}/`, where `root` is `--out`, else the
//! `FERD_OUT` environment variable, else `output.root`.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Profile, RunConfig};

use crate::data::Dataset;
use crate::distill::{run_with, RunContext, RunOutput};
use crate::error::FerdError;
use crate::eval::{evaluate, read_report, targeted_success_matrix, write_matrix_csv, write_per_class_csv, write_report, EvalReport};
use crate::model_zoo::{load_checkpoint, save_checkpoint, train_robust_teacher, Model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_CHECKPOINT: i32 = 3;
pub const EXIT_CORRUPT_CHECKPOINT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ferd", version, about = "Fairness-enhanced data-free robustness distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML file overlaid on the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Output root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated attack list for evaluation (clean,fgsm,pgd,cw).
    #[arg(long, global = true, value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub no_reweight: bool,
    #[arg(long, global = true)]
    pub no_fae: bool,
    #[arg(long, global = true)]
    pub no_utae: bool,
    /// Write run.json and stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarially train a teacher on the configured dataset.
    TrainTeacher,
    /// Distill a student from the teacher checkpoint.
    Distill {
        /// Teacher checkpoint (overrides distill.teacher).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Class-wise evaluation of one checkpoint.
    Eval { checkpoint: PathBuf },
    /// Per-class accuracy series and confusion matrices for several models.
    Observe {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Summarize existing report files into one CSV.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher => "teacher",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Observe { .. } => "observe",
            Command::Report { .. } => "report",
        }
    }
}

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<FerdError> for CliError {
    fn from(e: FerdError) -> Self {
        let code = match &e {
            FerdError::Config(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        FerdError::Io(e).into()
    }
}

/// Load a model checkpoint, mapping absence and corruption to their exit codes.
pub fn load_model(path: &Path, what: &str) -> Result<Model, CliError> {
    if !path.exists() {
        return Err(CliError { code: EXIT_MISSING_CHECKPOINT, message: format!("{what} checkpoint {} does not exist", path.display()) });
    }
    load_checkpoint(path).map_err(|e| match e {
        FerdError::MissingFile(_) => CliError { code: EXIT_MISSING_CHECKPOINT, message: format!("{what} checkpoint {}: {e}", path.display()) },
        FerdError::Io(_) => CliError { code: EXIT_FAILURE, message: format!("{what} checkpoint {}: {e}", path.display()) },
        _ => CliError { code: EXIT_CORRUPT_CHECKPOINT, message: format!("{what} checkpoint {} is corrupt: {e}", path.display()) },
    })
}

/// Fully resolved run configuration plus where its artifacts go.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub root: PathBuf,
}

pub fn resolve(common: &Common, command: &str) -> Result<Resolved, CliError> {
    let mut config = RunConfig::load(common.profile, common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(a) = &common.attacks {
        config.eval.attacks = a.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    config.distill.no_reweight |= common.no_reweight;
    config.distill.no_fae |= common.no_fae;
    config.distill.no_utae |= common.no_utae;
    let root = match (&common.out, std::env::var_os("FERD_OUT")) {
        (Some(p), _) => p.clone(),
        (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
        _ => config.output_root(),
    };
    config.output.root = root.display().to_string();
    if config.output.run_id.is_empty() {
        config.output.run_id = command.to_string();
    }
    let dir = root.join(&config.output.run_id);
    Ok(Resolved { config, dir, root })
}

fn write_manifest(r: &Resolved, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&r.dir)?;
    let doc = serde_json::json!({ "command": command, "config": r.config });
    std::fs::write(r.dir.join("run.json"), serde_json::to_string_pretty(&doc).map_err(FerdError::from)? + "\n")?;
    Ok(())
}

fn load_data(r: &Resolved) -> Result<(Dataset, Dataset), CliError> {
    Ok(r.config.data_source()?.load()?)
}

fn eval_subset(r: &Resolved, test: Dataset) -> Result<Dataset, CliError> {
    Ok(match r.config.data.eval_per_class {
        0 => test,
        n => test.balanced_subset(n)?,
    })
}

pub fn cmd_train_teacher(r: &Resolved) -> Result<PathBuf, CliError> {
    let cfg = r.config.teacher_config();
    let (train, test) = load_data(r)?;
    let (model, logs) = train_robust_teacher(&train, Some(&test), &cfg)?;
    let path = r.dir.join("teacher.ckpt");
    save_checkpoint(&model, &path)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(r.dir.join("teacher_log.csv"))?));
    for l in &logs {
        w.serialize(l).map_err(FerdError::from)?;
    }
    w.flush()?;
    println!("teacher checkpoint: {}", path.display());
    Ok(path)
}

pub fn cmd_distill(r: &Resolved, teacher_flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let teacher_path = match (teacher_flag, r.config.distill.teacher.as_str()) {
        (Some(p), _) => p.to_path_buf(),
        (None, "") => r.root.join("teacher").join("teacher.ckpt"),
        (None, p) => PathBuf::from(p),
    };
    let teacher = load_model(&teacher_path, "teacher")?;
    let cfg = r.config.distill_config();
    let eval_set = if cfg.eval_every > 0 { Some(eval_subset(r, load_data(r)?.1)?) } else { None };
    let ctx = RunContext { eval_set: eval_set.as_ref(), output: Some(RunOutput { dir: r.dir.clone() }), resume_from: None };
    let (_, history) = run_with(&teacher, &cfg, &ctx)?;
    println!("student checkpoint: {} ({} history rows, arm {})", ctx.output.as_ref().unwrap().final_student().display(), history.rows.len(), cfg.ablation.arm_name());
    Ok(r.dir.join("history.csv"))
}

fn evaluate_checkpoint(r: &Resolved, path: &Path, data: &Dataset) -> Result<(Model, EvalReport), CliError> {
    let model = load_model(path, "model")?;
    let attacks = r.config.eval_attacks()?;
    let report = evaluate(
        &model,
        data,
        &attacks,
        r.config.eval.worst_k_percent,
        r.config.eval.batch_size,
        &r.config.output.run_id,
        &path.display().to_string(),
        &r.config.data.source,
    )?;
    Ok((model, report))
}

fn model_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(parent) => format!("{}/{stem}", parent.to_string_lossy()),
        None => stem,
    }
}

pub fn cmd_eval(r: &Resolved, checkpoint: &Path) -> Result<PathBuf, CliError> {
    // Check the checkpoint before touching the dataset so a bad path fails fast.
    load_model(checkpoint, "model")?;
    let data = eval_subset(r, load_data(r)?.1)?;
    let (model, report) = evaluate_checkpoint(r, checkpoint, &data)?;
    let path = r.dir.join("report.json");
    write_report(&report, &path)?;
    write_per_class_csv(BufWriter::new(File::create(r.dir.join("per_class.csv"))?), &[(&model_label(checkpoint), &report)])?;
    for (attack, m) in &report.confusion {
        write_matrix_csv(BufWriter::new(File::create(r.dir.join(format!("confusion_{attack}.csv")))?), m)?;
    }
    if r.config.eval.targeted {
        let spec = r.config.attack.targeted.clone().with_seed(r.config.seed);
        let m = targeted_success_matrix(&model, &data, &spec, r.config.eval.batch_size)?;
        write_matrix_csv(BufWriter::new(File::create(r.dir.join("targeted.csv"))?), &m)?;
    }
    for (attack, a) in &report.aggregates {
        println!("{attack:>6}: avg {:.4} worst {:.4} worst-k {:.4} nsd {:.4}", a.avg, a.worst, a.worst_k, a.nsd);
    }
    Ok(path)
}

pub fn cmd_observe(r: &Resolved, checkpoints: &[PathBuf]) -> Result<PathBuf, CliError> {
    for p in checkpoints {
        load_model(p, "model")?;
    }
    let data = eval_subset(r, load_data(r)?.1)?;
    let mut reports = Vec::new();
    for (i, p) in checkpoints.iter().enumerate() {
        let (model, report) = evaluate_checkpoint(r, p, &data)?;
        let label = format!("m{i}");
        for (attack, m) in &report.confusion {
            write_matrix_csv(BufWriter::new(File::create(r.dir.join(format!("confusion_{label}_{attack}.csv")))?), m)?;
        }
        let spec = r.config.attack.targeted.clone().with_seed(r.config.seed);
        let t = targeted_success_matrix(&model, &data, &spec, r.config.eval.batch_size)?;
        write_matrix_csv(BufWriter::new(File::create(r.dir.join(format!("targeted_{label}.csv")))?), &t)?;
        write_report(&report, r.dir.join(format!("report_{label}.json")))?;
        reports.push((format!("{label}:{}", model_label(p)), report));
    }
    let series: Vec<(&str, &EvalReport)> = reports.iter().map(|(l, rep)| (l.as_str(), rep)).collect();
    let path = r.dir.join("per_class.csv");
    write_per_class_csv(BufWriter::new(File::create(&path)?), &series)?;
    println!("wrote {} model series to {}", reports.len(), r.dir.display());
    Ok(path)
}

pub fn cmd_report(r: &Resolved, reports: &[PathBuf]) -> Result<PathBuf, CliError> {
    let path = r.dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    w.write_record(["report", "attack", "avg", "worst", "worst_k", "nsd"]).map_err(FerdError::from)?;
    let mut per_class = Vec::new();
    for p in reports {
        let rep = read_report(p)?;
        for (attack, a) in &rep.aggregates {
            let row = [p.display().to_string(), attack.clone(), a.avg.to_string(), a.worst.to_string(), a.worst_k.to_string(), a.nsd.to_string()];
            println!("{}", row.join(","));
            w.write_record(&row).map_err(FerdError::from)?;
        }
        per_class.push((model_label(p), rep));
    }
    w.flush()?;
    let series: Vec<(&str, &EvalReport)> = per_class.iter().map(|(l, rep)| (l.as_str(), rep)).collect();
    write_per_class_csv(BufWriter::new(File::create(r.dir.join("per_class.csv"))?), &series)?;
    Ok(path)
}

/// Parse `args` (including the program name) and run the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let r = resolve(&cli.common, name)?;
    r.config.distill_config().validate()?;
    r.config.eval_attacks()?;
    write_manifest(&r, name)?;
    if cli.common.dry_run {
        println!("{}", r.dir.join("run.json").display());
        return Ok(());
    }
    match &cli.command {
        Command::TrainTeacher => cmd_train_teacher(&r).map(drop),
        Command::Distill { teacher } => cmd_distill(&r, teacher.as_deref()).map(drop),
        Command::Eval { checkpoint } => cmd_eval(&r, checkpoint).map(drop),
        Command::Observe { checkpoints } => cmd_observe(&r, checkpoints).map(drop),
        Command::Report { reports } => cmd_report(&r, reports).map(drop),
    }
}
