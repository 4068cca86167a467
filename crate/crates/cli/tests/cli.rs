use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seeds = [5]

[data]
source = "builtin"
train_size = 1000
test_size = 200
holdout_size = 200

[clean]
min_accuracy = 0.5

[clean.train]
epochs = 5

[distill]
steps = 40

[watermark]
n = 12
k = 6

[watermark.injection]
trigger_acc_target = 0.9

[watermark.injection.post]
q = 2
r = 20
pixel_steps = 3

[attack.adversarial]
epochs = 2

[capacity]
trials = 200
"#;

fn wmark(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_wmark"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        Fixture { _tmp: tmp, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        wmark(&self.dir, args)
    }
}

#[test]
fn full_pipeline() {
    let f = Fixture::new();
    let work = f.path("work");
    let pkg = f.path("pkg");

    let o = f.run(&["train-clean", "--out", s(&work)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = json(&work.join("train-clean.json"));
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 16);

    // same seed, same bytes
    let again = f.path("again");
    assert_eq!(code(&f.run(&["train-clean", "--out", s(&again)])), 0);
    assert_eq!(fs::read(work.join("clean.wmdl")).unwrap(), fs::read(again.join("clean.wmdl")).unwrap());

    let clean = work.join("clean.wmdl");
    let o = f.run(&["distill", "--clean", s(&clean), "--out", s(&work)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(json(&work.join("distill.json"))["student_agreement"].as_f64().unwrap() >= 0.0);

    let gen = work.join("generator.wmdl");
    let o = f.run(&["embed", "--clean", s(&clean), "--generator", s(&gen), "--out", s(&pkg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&pkg.join("embed.json"))["first_window_verifies"], true);

    let o = f.run(&["evidence", "--package", s(&pkg), "--out", s(&work)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let evidence = work.join("evidence.json");

    let o = f.run(&["verify", "--package", s(&pkg), "--evidence", s(&evidence), "--out", s(&work)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&work.join("verify.json"));
    assert_eq!(report["decision"], "Pass");
    assert!(report["mu_hat"].is_number() && report["statistic"].is_number());
    assert!(report["tallies"]["chain"].is_number());

    // rotate labels by one row: label consistency breaks for most rows
    let mut doc = json(&evidence);
    let rows = doc["rows"].as_array_mut().unwrap();
    let labels: Vec<Value> = rows.iter().map(|r| r["label"].clone()).collect();
    let n = rows.len();
    for (i, row) in rows.iter_mut().enumerate() {
        row["label"] = labels[(i + 1) % n].clone();
    }
    let shuffled = work.join("shuffled.json");
    fs::write(&shuffled, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = f.run(&["verify", "--package", s(&pkg), "--evidence", s(&shuffled), "--out", s(&work)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let text = fs::read_to_string(&evidence).unwrap();
    let truncated = work.join("truncated.json");
    fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    let o = f.run(&["verify", "--package", s(&pkg), "--evidence", s(&truncated), "--out", s(&work)]);
    assert_eq!(code(&o), 2);

    // independent clean model: the watermark must not show up
    let other = f.path("other");
    assert_eq!(code(&f.run(&["train-clean", "--seed", "99", "--out", s(&other)])), 0);
    let o = f.run(&[
        "verify",
        "--package",
        s(&pkg),
        "--evidence",
        s(&evidence),
        "--model",
        s(&other.join("clean.wmdl")),
        "--out",
        s(&work),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    let attacks = f.path("attacks");
    let o = f.run(&["attack", "--package", s(&pkg), "--kind", "fine-tune", "--epochs", "3", "--out", s(&attacks)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(attacks.join("attack-fine-tune.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# wmark attack config_hash="));
    assert_eq!(lines[1], "step,normal_acc,trigger_acc");
    assert_eq!(lines.len() - 2, 3 + 1);
    assert!(json(&attacks.join("attack-fine-tune.json"))["verification"]["decision"].is_string());

    let o = f.run(&["attack", "--package", s(&pkg), "--kind", "adversarial", "--out", s(&attacks)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let adv = json(&attacks.join("attack-adversarial.json"));
    assert_eq!(adv["kind"], "adversarial-tune");
    assert!(adv["forged_holdout_rate"].is_number());

    let o = f.run(&["attack", "--package", s(&pkg), "--kind", "prune", "--out", s(&attacks)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prune = fs::read_to_string(attacks.join("attack-prune.csv")).unwrap();
    assert_eq!(prune.lines().nth(1), Some("fraction,normal_acc,trigger_acc,decision"));
}

#[test]
fn distill_rejects_zero_steps() {
    let f = Fixture::new();
    let o = f.run(&["distill", "--clean", "missing.wmdl", "--steps", "0", "--out", s(&f.dir)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_idx_file_names_the_path() {
    let f = Fixture::new();
    let cfg = f.path("idx.toml");
    fs::write(
        &cfg,
        r#"
[data]
source = "idx"
train_images = "/nonexistent/train-images-idx3-ubyte"
train_labels = "/nonexistent/train-labels-idx1-ubyte"
test_images = "/nonexistent/t10k-images-idx3-ubyte"
test_labels = "/nonexistent/t10k-labels-idx1-ubyte"
num_classes = 10
"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_wmark"))
        .args(["--config", s(&cfg), "train-clean", "--out", s(&f.dir)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/train-images-idx3-ubyte"), "{}", stderr(&o));
}

#[test]
fn capacity_analytic_and_simulated() {
    let f = Fixture::new();
    let o = f.run(&["capacity", "--n-hat", "120", "--simulate", "4,8", "--out", s(&f.dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(f.path("capacity.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[1], "J,mu,sigma2,p_fail,p_success,empirical_mean,empirical_var");
    let row4: Vec<&str> = lines[2 + 3].split(',').collect();
    assert_eq!(row4[0], "4");
    let mu: f64 = row4[1].parse().unwrap();
    let emp: f64 = row4[5].parse().unwrap();
    assert!((emp - mu).abs() / mu < 0.25, "mu {mu} empirical {emp}");
    let summary = json(&f.path("capacity.json"));
    assert_eq!(summary["n_hat"], 120);
    assert!((summary["bound"].as_f64().unwrap() - 2.4).abs() < 1e-12);
    assert_eq!(summary["embeddable_keys"], 2);
}

#[test]
fn unreachable_target_exits_3() {
    let f = Fixture::new();
    let work = f.path("work");
    assert_eq!(code(&f.run(&["train-clean", "--out", s(&work)])), 0);
    let cfg = f.path("strict.toml");
    fs::write(
        &cfg,
        SMALL.replace("trigger_acc_target = 0.9", "trigger_acc_target = 1.0\nmax_epochs = 1\nscheme = \"solely\"\nbackdoor = \"trigger\""),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_wmark"))
        .args(["--config", s(&cfg), "embed", "--clean", s(&work.join("clean.wmdl")), "--out", s(&f.path("pkg"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(json(&f.path("pkg").join("embed.json"))["below_target"], true);
}

#[test]
fn clean_accuracy_floor_exits_1() {
    let f = Fixture::new();
    let cfg = f.path("floor.toml");
    fs::write(&cfg, SMALL.replace("min_accuracy = 0.5", "min_accuracy = 0.999").replace("epochs = 5", "epochs = 1")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_wmark"))
        .args(["--config", s(&cfg), "train-clean", "--out", s(&f.dir)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(f.path("clean.wmdl").exists());
}
