//! `wmark`: train, watermark, verify and attack image classifiers.
//!
//! Exit codes: 0 success (verification passed), 1 verification failed or a
//! quality floor was missed, 2 usage/input error, 3 watermark below its
//! trigger-accuracy target.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use wmark_core::attacks::{
    adversarial_tune_attack, fine_tune_attack, prune_attack, prune_csv, sacrifice, AttackContext, AttackOutcome,
};
use wmark_core::capacity::{capacity_bound, measure_n_hat, simulate_collisions, to_csv, SimResult};
use wmark_core::dfd::{agreement, Generator};
use wmark_core::exec::Exec;
use wmark_core::experiment::{
    distill_clean, embed_watermark, median, needs_generator, train_clean, DeskData, ExperimentConfig,
};
use wmark_core::injector::{Backdoor, Scheme};
use wmark_core::nn::{evaluate_accuracy, Model};
use wmark_core::package::WatermarkPackage;
use wmark_core::rng::derive_seed;
use wmark_core::verifier::{build_evidence, verify, Evidence, VerificationConfig, VerificationResult};

#[derive(Parser)]
#[command(name = "wmark", version, about = "Black-box watermarking workbench for image classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the first entry of `seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean classifier.
    TrainClean,
    /// Distill an anchor generator from a clean classifier.
    Distill {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Watermark a clean classifier; writes a package directory.
    Embed {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        key: Option<String>,
    },
    /// Disclose an evidence window from a package.
    Evidence {
        #[arg(long)]
        package: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        k_prime: usize,
    },
    /// Check evidence against a (suspect) model.
    Verify {
        /// Package supplying the encoder and match settings.
        #[arg(long)]
        package: PathBuf,
        #[arg(long)]
        evidence: PathBuf,
        /// Suspect model; defaults to the package's own.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run a removal attack against a package.
    Attack {
        #[arg(long)]
        package: PathBuf,
        #[arg(long, value_enum)]
        kind: AttackArg,
        /// Overrides the configured epoch count (tuning attacks).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Capacity bound, optional Monte Carlo check and injection sweep.
    Capacity {
        /// Simulate collisions at these J values.
        #[arg(long, value_delimiter = ',')]
        simulate: Vec<u64>,
        /// Measure N_hat by injecting into this clean model.
        #[arg(long, requires = "generator")]
        clean: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Supply N_hat directly instead of measuring it.
        #[arg(long)]
        n_hat: Option<u64>,
    },
    /// The scheme x backdoor grid over every configured seed.
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    FineTune,
    Adversarial,
    Prune,
}

/// An error with a specific exit code.
struct Exit(u8, String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(Exit(code, msg)) = e.downcast_ref::<Exit>() {
                eprintln!("wmark: {msg}");
                return ExitCode::from(*code);
            }
            eprintln!("wmark: {e:#}");
            ExitCode::from(2)
        }
    }
}

impl std::fmt::Debug for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.1)
    }
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.1)
    }
}

impl std::error::Error for Exit {}

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn header(&self, command: &str) -> Value {
        json!({ "command": command, "config_hash": self.hash, "seed": self.seed })
    }

    fn csv_header(&self, command: &str) -> String {
        format!("# wmark {command} config_hash={} seed={}\n", self.hash, self.seed)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, mut body: Value, command: &str) -> Result<()> {
        if let (Value::Object(map), Value::Object(head)) = (&mut body, self.header(command)) {
            for (k, v) in head {
                map.insert(k, v);
            }
        }
        let text = serde_json::to_string_pretty(&body)?;
        println!("{text}");
        self.write(name, &(text + "\n"))?;
        Ok(())
    }

    fn data(&self) -> Result<DeskData> {
        Ok(DeskData::load(&self.cfg.data, self.seed)?)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_generator(path: &Path) -> Result<Generator> {
    Generator::load(path).with_context(|| format!("loading generator {}", path.display()))
}

fn load_package(path: &Path) -> Result<WatermarkPackage> {
    WatermarkPackage::load(path).with_context(|| format!("loading package {}", path.display()))
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.seeds[0] = seed;
    }
    cfg.validate()?;
    let ctx = Ctx {
        hash: cfg.hash(),
        seed: cfg.seeds[0],
        out: cli.common.out,
        cfg,
    };
    match cli.command {
        Command::TrainClean => cmd_train_clean(&ctx),
        Command::Distill { clean, steps } => cmd_distill(&ctx, &clean, steps),
        Command::Embed { clean, generator, key } => cmd_embed(&ctx, &clean, generator.as_deref(), key),
        Command::Evidence { package, k, k_prime } => cmd_evidence(&ctx, &package, k, k_prime),
        Command::Verify {
            package,
            evidence,
            model,
            tau,
        } => cmd_verify(&ctx, &package, &evidence, model.as_deref(), tau),
        Command::Attack { package, kind, epochs } => cmd_attack(&ctx, &package, kind, epochs),
        Command::Capacity {
            simulate,
            clean,
            generator,
            n_hat,
        } => cmd_capacity(&ctx, &simulate, clean.as_deref(), generator.as_deref(), n_hat),
        Command::Grid => cmd_grid(&ctx),
    }
}

fn cmd_train_clean(ctx: &Ctx) -> Result<u8> {
    let data = ctx.data()?;
    let (model, acc) = train_clean(&ctx.cfg.clean, &data, ctx.seed)?;
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("clean.wmdl");
    model.save(&path)?;
    let floor = ctx.cfg.clean.min_accuracy;
    ctx.write_json(
        "train-clean.json",
        json!({ "checkpoint": path, "test_accuracy": acc, "min_accuracy": floor }),
        "train-clean",
    )?;
    if acc < floor {
        bail!(Exit(1, format!("clean accuracy {acc:.4} below floor {floor}")));
    }
    Ok(0)
}

fn cmd_distill(ctx: &Ctx, clean: &Path, steps: Option<usize>) -> Result<u8> {
    let model = load_model(clean)?;
    let data = ctx.data()?;
    if model.input_shape() != data.test.image_shape() {
        bail!("model input {:?} does not match data {:?}", model.input_shape(), data.test.image_shape());
    }
    let acc = evaluate_accuracy(&model, &data.test)?;
    let mut dcfg = ctx.cfg.distill;
    if let Some(s) = steps {
        dcfg.steps = s;
    }
    let out = distill_clean(&dcfg, &model, acc, ctx.seed)?;
    fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("generator.wmdl");
    out.generator.save(&path)?;
    let agree = agreement(&out.generator, &model, &out.student, 1000, derive_seed(ctx.seed, 0xA6))?;
    ctx.write_json(
        "distill.json",
        json!({
            "generator": path,
            "steps": dcfg.steps,
            "student_agreement": agree,
            "diverged": out.report.diverged,
            "warnings": out.report.warnings,
        }),
        "distill",
    )?;
    Ok(0)
}

fn cmd_embed(ctx: &Ctx, clean: &Path, generator: Option<&Path>, key: Option<String>) -> Result<u8> {
    let model = load_model(clean)?;
    let mut wcfg = ctx.cfg.watermark.clone();
    if let Some(k) = key {
        wcfg.key = k;
    }
    let gen = match generator {
        Some(p) => Some(load_generator(p)?),
        None if needs_generator(&wcfg) => bail!("this scheme/backdoor/encoder needs --generator"),
        None => None,
    };
    let data = ctx.data()?;
    let train_data = (wcfg.injection.scheme == Scheme::WithTrainingData).then_some(&data.train);
    let pkg = embed_watermark(&wcfg, &model, gen.as_ref(), train_data, ctx.seed)?;
    pkg.save(&ctx.out)?;
    let vcfg = VerificationConfig::for_package(&pkg.meta, wcfg.tau);
    let ev = build_evidence(&pkg, wcfg.k, 0)?;
    let check = verify(&pkg.model, &ev, &pkg.encoder, &vcfg)?;
    ctx.write_json(
        "embed.json",
        json!({
            "clean_test_accuracy": evaluate_accuracy(&model, &data.test)?,
            "test_accuracy": evaluate_accuracy(&pkg.model, &data.test)?,
            "trigger_accuracy": pkg.meta.trigger_accuracy,
            "epochs": pkg.meta.epochs,
            "epsilon": pkg.meta.epsilon,
            "below_target": pkg.meta.below_target,
            "first_window_verifies": check.passed(),
        }),
        "embed",
    )?;
    if pkg.meta.below_target {
        bail!(Exit(3, format!("trigger accuracy {:.3} below target", pkg.meta.trigger_accuracy)));
    }
    Ok(0)
}

fn cmd_evidence(ctx: &Ctx, package: &Path, k: Option<usize>, k_prime: usize) -> Result<u8> {
    let pkg = load_package(package)?;
    let ev = build_evidence(&pkg, k.unwrap_or(ctx.cfg.watermark.k), k_prime)?;
    let path = ctx.write("evidence.json", &ev.to_document())?;
    println!("{}", path.display());
    Ok(0)
}

fn report(result: &VerificationResult) -> Value {
    let [enc, label, pred, chain] = result.tallies();
    json!({
        "decision": format!("{:?}", result.decision),
        "acc": result.acc,
        "K": result.k,
        "mu_hat": result.mu_hat,
        "sigma_hat": result.sigma_hat,
        "z": if result.z.is_finite() { json!(result.z) } else { json!(result.z.to_string()) },
        "statistic": result.statistic,
        "tallies": { "encoder": enc, "label": label, "prediction": pred, "chain": chain },
    })
}

fn cmd_verify(ctx: &Ctx, package: &Path, evidence: &Path, model: Option<&Path>, tau: Option<f64>) -> Result<u8> {
    let pkg = load_package(package)?;
    let text = fs::read_to_string(evidence).with_context(|| format!("reading evidence {}", evidence.display()))?;
    let ev = Evidence::from_document(&text).with_context(|| format!("parsing evidence {}", evidence.display()))?;
    let suspect = match model {
        Some(p) => load_model(p)?,
        None => pkg.model.clone(),
    };
    let vcfg = VerificationConfig::for_package(&pkg.meta, tau.unwrap_or(ctx.cfg.watermark.tau));
    let result = verify(&suspect, &ev, &pkg.encoder, &vcfg)?;
    ctx.write_json("verify.json", report(&result), "verify")?;
    Ok(if result.passed() { 0 } else { 1 })
}

fn outcome_summary(o: &AttackOutcome) -> Value {
    json!({
        "kind": o.kind,
        "final_normal_accuracy": o.final_normal_acc(),
        "final_trigger_accuracy": o.final_trigger_acc(),
        "forged_holdout_rate": o.forged_holdout_rate,
        "normal_as_c_adv": o.normal_as_c_adv,
        "verification": report(&o.verification_after),
    })
}

fn cmd_attack(ctx: &Ctx, package: &Path, kind: AttackArg, epochs: Option<usize>) -> Result<u8> {
    let pkg = load_package(package)?;
    let data = ctx.data()?;
    let actx = AttackContext::for_package(&pkg, data.test.clone(), ctx.cfg.watermark.tau)?;
    let acfg = &ctx.cfg.attack;
    match kind {
        AttackArg::FineTune => {
            let mut tc = acfg.fine_tune.with_seed(derive_seed(ctx.seed, acfg.fine_tune.seed));
            tc.epochs = epochs.unwrap_or(tc.epochs);
            let o = fine_tune_attack(&pkg, &actx, &data.holdout, &tc)?;
            ctx.write("attack-fine-tune.csv", &(ctx.csv_header("attack") + &o.to_csv()))?;
            ctx.write_json("attack-fine-tune.json", outcome_summary(&o), "attack")?;
        }
        AttackArg::Adversarial => {
            let mut ac = acfg.adversarial;
            ac.seed = derive_seed(ctx.seed, ac.seed);
            ac.epochs = epochs.unwrap_or(ac.epochs);
            let with = acfg.adversarial_with_data.then_some(&data.holdout);
            let o = adversarial_tune_attack(&pkg, &actx, with, &ac)?;
            ctx.write("attack-adversarial.csv", &(ctx.csv_header("attack") + &o.to_csv()))?;
            ctx.write_json("attack-adversarial.json", outcome_summary(&o), "attack")?;
        }
        AttackArg::Prune => {
            let outs = prune_attack(&pkg, &actx, &acfg.prune_fractions)?;
            let clean_acc = outs.first().map_or(0.0, |o| o.normal_acc_curve[0]);
            ctx.write("attack-prune.csv", &(ctx.csv_header("attack") + &prune_csv(&outs)))?;
            let sac = outs
                .iter()
                .find(|o| o.steps[0] == 0.0)
                .map(|o| sacrifice(&outs, o.final_normal_acc(), pkg.meta.num_classes));
            ctx.write_json(
                "attack-prune.json",
                json!({
                    "kind": "prune",
                    "fractions": outs.len(),
                    "unpruned_normal_accuracy": clean_acc,
                    "sacrifice_to_chance": sac.flatten(),
                    "final": outs.last().map(outcome_summary),
                }),
                "attack",
            )?;
        }
    }
    Ok(0)
}

fn cmd_capacity(
    ctx: &Ctx,
    simulate: &[u64],
    clean: Option<&Path>,
    generator: Option<&Path>,
    n_hat: Option<u64>,
) -> Result<u8> {
    let cap = &ctx.cfg.capacity;
    let p = cap.params;
    let mut curve = None;
    let n_hat = match (clean, n_hat) {
        (Some(clean), _) => {
            let model = load_model(clean)?;
            let gen = load_generator(generator.expect("clap enforces --generator"))?;
            let data = ctx.data()?;
            let train_data = (ctx.cfg.watermark.injection.scheme == Scheme::WithTrainingData).then_some(&data.train);
            let mut wcfg = ctx.cfg.watermark.clone();
            let sweep = measure_n_hat(p.gamma, cap.sweep_batch, cap.sweep_max, |n| {
                wcfg.n = n as usize;
                let pkg = embed_watermark(&wcfg, &model, Some(&gen), train_data, ctx.seed)?;
                evaluate_accuracy(&pkg.model, &data.test)
            })?;
            let n = sweep.n_hat;
            curve = Some(sweep.curve);
            n
        }
        (None, Some(n)) => n,
        (None, None) => cap.sweep_max,
    };
    let report = capacity_bound(&p, n_hat, cap.j_max)?;
    let sims: Vec<(u64, SimResult)> = simulate
        .iter()
        .map(|&j| Ok((j, simulate_collisions(j, &p, cap.trials, derive_seed(ctx.seed, j), Exec::default())?)))
        .collect::<wmark_core::Result<_>>()?;
    ctx.write("capacity.csv", &(ctx.csv_header("capacity") + &to_csv(&report, &sims)))?;
    ctx.write_json(
        "capacity.json",
        json!({
            "params": p,
            "j_star": report.j_star,
            "n_hat": report.n_hat,
            "n_hat_curve": curve,
            "performance_term": report.performance_term,
            "bound": report.bound,
            "embeddable_keys": report.embeddable_keys,
            "notes": report.notes,
            "simulations": sims.iter().map(|(j, s)| json!({ "J": j, "mean": s.mean, "var": s.var, "warning": s.warning })).collect::<Vec<_>>(),
        }),
        "capacity",
    )?;
    Ok(0)
}

fn cmd_grid(ctx: &Ctx) -> Result<u8> {
    let mut csv = ctx.csv_header("grid");
    csv += "seed,scheme,backdoor,clean_acc,test_acc,drop,trigger_acc,epochs,below_target,verified\n";
    let mut drops: Vec<(String, f64)> = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let data = DeskData::load(&ctx.cfg.data, seed)?;
        let (clean, clean_acc) = train_clean(&ctx.cfg.clean, &data, seed)?;
        let gen = distill_clean(&ctx.cfg.distill, &clean, clean_acc, seed)?.generator;
        for scheme in [Scheme::WithAnchors, Scheme::WithTrainingData, Scheme::Solely] {
            for backdoor in [Backdoor::Trigger, Backdoor::PostTrigger] {
                let mut wcfg = ctx.cfg.watermark.clone();
                wcfg.injection.scheme = scheme;
                wcfg.injection.backdoor = backdoor;
                let pkg = embed_watermark(&wcfg, &clean, Some(&gen), Some(&data.train), seed)?;
                let acc = evaluate_accuracy(&pkg.model, &data.test)?;
                let vcfg = VerificationConfig::for_package(&pkg.meta, wcfg.tau);
                let ok = verify(&pkg.model, &build_evidence(&pkg, wcfg.k, 0)?, &pkg.encoder, &vcfg)?.passed();
                let cell = format!("{}{}", scheme.letter(), backdoor.letter());
                drops.push((cell, clean_acc - acc));
                csv += &format!(
                    "{seed},{},{},{clean_acc},{acc},{},{},{},{},{ok}\n",
                    scheme.letter(),
                    backdoor.letter(),
                    clean_acc - acc,
                    pkg.meta.trigger_accuracy,
                    pkg.meta.epochs,
                    pkg.meta.below_target,
                );
            }
        }
    }
    ctx.write("grid.csv", &csv)?;
    let mut medians = serde_json::Map::new();
    for cell in ["AT", "AP", "DT", "DP", "BT", "BP"] {
        let v: Vec<f64> = drops.iter().filter(|(c, _)| c == cell).map(|(_, d)| *d).collect();
        medians.insert(cell.into(), json!(median(&v)));
    }
    ctx.write_json("grid.json", json!({ "median_accuracy_drop": medians }), "grid")?;
    Ok(0)
}
