//! End-to-end tests of the `ferd` binary on a tiny synthetic config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ferd::distill::History;
use ferd::eval::{read_report, validate_report};

const TINY: &str = r#"
[data]
source = "synthetic:classes=3,channels=3,size=8,blocks=4,train=48,test=24,contrast=0.3,noise=0.1,overlap=0,seed=1"

[teacher]
epochs = 1
batch_size = 16

[distill]
epochs = 2
gen_iters = 2
student_iters = 2
batch_size = 8
reweight_batch = 9

[generator.ib]
steps = 2

[eval]
batch_size = 24
"#;

fn ferd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ferd")).args(args).env_remove("FERD_OUT").output().expect("spawn ferd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn args<'a>(&'a self, extra: &[&'a str]) -> Vec<&'a str> {
        self.args_at(&self.root, extra)
    }
    fn args_at<'a>(&'a self, root: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
        let mut a = extra.to_vec();
        a.extend(["--profile", "desk", "--config", self.config.to_str().unwrap(), "--out", root.to_str().unwrap()]);
        a
    }
    fn teacher(&self) -> PathBuf {
        self.root.join("teacher").join("teacher.ckpt")
    }
}

/// A root with a trained tiny teacher, shared by the tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let f = Fixture { root: dir.path().join("runs"), config, _dir: dir };
        let o = ferd(&f.args(&["train-teacher"]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(f.teacher().exists());
        f
    })
}

fn own_root(f: &Fixture, name: &str) -> PathBuf {
    let root = f.root.parent().unwrap().join(name);
    std::fs::create_dir_all(root.join("teacher")).unwrap();
    std::fs::copy(f.teacher(), root.join("teacher").join("teacher.ckpt")).unwrap();
    root
}

fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        cells.push((rec[0].parse().unwrap(), rec[1].parse().unwrap(), rec[2].parse().unwrap()));
    }
    let n = cells.iter().map(|c| c.0.max(c.1)).max().unwrap() + 1;
    let mut m = vec![vec![f64::NAN; n]; n];
    for (i, j, v) in cells {
        m[i][j] = v;
    }
    m
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\nlamda1 = 0.5\n").unwrap();
    let o = ferd(&["distill", "--profile", "desk", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lamda1"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[distill]\nbatch_size = 0\n").unwrap();
    let o = ferd(&["distill", "--profile", "desk", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = ferd(&["eval", "x.ckpt", "--attacks", "clean,deepfool", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("deepfool"));
    assert_eq!(code(&ferd(&["no-such-command"])), 2);
}

#[test]
fn missing_teacher_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = ferd(&["distill", "--profile", "desk", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("teacher"));
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("teacher.ckpt");
    std::fs::write(&bad, b"FERDCKPT but not really").unwrap();
    let o = ferd(&["distill", "--profile", "desk", "--teacher", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let f = fixture();
    let bytes = std::fs::read(f.teacher()).unwrap();
    let truncated = dir.path().join("truncated.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let o = ferd(&f.args(&["eval", truncated.to_str().unwrap()]));
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn dry_run_writes_manifest_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = ferd(&["distill", "--profile", "desk", "--seed", "42", "--no-fae", "--out", dir.path().to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("distill").join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "distill");
    assert_eq!(manifest["config"]["seed"], 42);
    assert_eq!(manifest["config"]["distill"]["no_fae"], true);
    assert!(!dir.path().join("distill").join("history.csv").exists());
}

#[test]
fn distill_writes_valid_history_and_seed_changes_it() {
    let f = fixture();
    let root = own_root(f, "seeds");
    let with_root = |seed: &str| {
        let o = ferd(&f.args_at(&root, &["distill", "--seed", seed]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(root.join("distill").join("history.csv")).unwrap()
    };
    let a = with_root("1");
    let b = with_root("2");
    let a2 = with_root("1");
    assert_eq!(a, a2);
    assert_ne!(a, b);
    let h = History::read_csv(&a[..]).unwrap();
    let weights = h.weights_by_epoch();
    assert_eq!(weights.len(), 2);
    assert!(root.join("distill").join("student.ckpt").exists());
    assert!(root.join("distill").join("class_weights.csv").exists());
}

#[test]
fn no_reweight_keeps_uniform_weights() {
    let f = fixture();
    let root = own_root(f, "uniform");
    let o = ferd(&f.args_at(&root, &["distill", "--no-reweight"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h = History::read_csv(std::fs::File::open(root.join("distill").join("history.csv")).unwrap()).unwrap();
    for (_, p) in h.weights_by_epoch() {
        assert!(p.iter().all(|&v| v == 1.0 / 3.0), "{p:?}");
    }
}

#[test]
fn eval_report_and_attack_selection() {
    let f = fixture();
    let teacher = f.teacher();
    let o = ferd(&f.args(&["eval", teacher.to_str().unwrap()]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_report(f.root.join("eval").join("report.json")).unwrap();
    validate_report(&report).unwrap();
    assert_eq!(report.aggregates.keys().collect::<Vec<_>>(), ["clean", "cw", "fgsm", "pgd"]);
    for a in report.aggregates.values() {
        assert!(a.worst <= a.worst_k && a.worst_k <= a.avg);
    }

    let sub = f.root.join("restricted");
    let o = ferd(&f.args_at(&sub, &["eval", teacher.to_str().unwrap(), "--attacks", "clean,pgd"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_report(sub.join("eval").join("report.json")).unwrap();
    assert_eq!(report.aggregates.keys().collect::<Vec<_>>(), ["clean", "pgd"]);
    assert!(sub.join("eval").join("confusion_pgd.csv").exists());
    assert!(!sub.join("eval").join("confusion_fgsm.csv").exists());

    let o = ferd(&f.args(&["report", sub.join("eval").join("report.json").to_str().unwrap()]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(f.root.join("report").join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn observe_two_models() {
    let f = fixture();
    let root = own_root(f, "observe");
    assert_eq!(code(&ferd(&f.args_at(&root, &["distill"]))), 0);
    let teacher = root.join("teacher").join("teacher.ckpt");
    let student = root.join("distill").join("student.ckpt");
    let o = ferd(&f.args_at(&root, &["observe", teacher.to_str().unwrap(), student.to_str().unwrap(), "--attacks", "clean,fgsm"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = root.join("observe");

    let mut rdr = csv::Reader::from_path(dir.join("per_class.csv")).unwrap();
    let models: std::collections::BTreeSet<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(models.len(), 2, "{models:?}");

    for m in ["m0", "m1"] {
        let report = read_report(dir.join(format!("report_{m}.json"))).unwrap();
        let conf = read_matrix(&dir.join(format!("confusion_{m}_clean.csv")));
        assert_eq!(conf.len(), 3);
        let total: f64 = conf.iter().flatten().sum();
        assert_eq!(total, 3.0 * 24.0);
        for (c, row) in conf.iter().enumerate() {
            let n: f64 = row.iter().sum();
            assert_eq!(row[c] / n, report.per_class_acc["clean"][c]);
        }
        let targeted = read_matrix(&dir.join(format!("targeted_{m}.csv")));
        assert_eq!(targeted.len(), 3);
        assert!(targeted.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
