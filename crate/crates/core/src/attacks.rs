//! Removal attacks against a watermarked model: fine-tuning, adversarial
//! tuning with forged triggers, and global magnitude pruning.
//!
//! Every attack works on a copy of the package's model and records normal
//! (test) accuracy and trigger accuracy before the attack and after each
//! step, plus a verification run on the final model.

use std::fmt::Write as _;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::codec::{Code, TriggerEncoder, CODE_LEN};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{accuracy, evaluate_accuracy, train, Model, Tensor, TrainConfig};
use crate::package::WatermarkPackage;
use crate::rng;
use crate::verifier::{verify, Evidence, VerificationConfig, VerificationResult};

/// What an attack is measured against.
#[derive(Debug, Clone)]
pub struct AttackContext {
    /// Held-out normal data.
    pub test: Dataset,
    pub evidence: Evidence,
    pub verification: VerificationConfig,
}

impl AttackContext {
    /// Evidence over the whole trigger set, with the package's own match
    /// settings.
    pub fn for_package(pkg: &WatermarkPackage, test: Dataset, tau: f64) -> Result<Self> {
        Ok(AttackContext {
            test,
            evidence: crate::verifier::build_evidence(pkg, pkg.triggers.len(), 0)?,
            verification: VerificationConfig::for_package(&pkg.meta, tau),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    FineTune,
    AdversarialTune,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    #[serde(skip)]
    pub model_attacked: Option<Model>,
    /// Epoch index (tuning) or pruned fraction, one per curve point.
    pub steps: Vec<f64>,
    pub normal_acc_curve: Vec<f64>,
    pub trigger_acc_curve: Vec<f64>,
    pub verification_after: VerificationResult,
    /// Adversarial tuning only: fresh forged triggers predicted `c_adv`.
    pub forged_holdout_rate: Option<f64>,
    /// Adversarial tuning only: normal test inputs predicted `c_adv`.
    pub normal_as_c_adv: Option<f64>,
}

impl AttackOutcome {
    pub fn final_normal_acc(&self) -> f64 {
        *self.normal_acc_curve.last().expect("curves are never empty")
    }

    pub fn final_trigger_acc(&self) -> f64 {
        *self.trigger_acc_curve.last().expect("curves are never empty")
    }

    /// CSV with header `step,normal_acc,trigger_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,normal_acc,trigger_acc\n");
        for ((s, n), t) in self.steps.iter().zip(&self.normal_acc_curve).zip(&self.trigger_acc_curve) {
            let _ = writeln!(out, "{s},{n},{t}");
        }
        out
    }
}

struct Probe<'a> {
    pkg: &'a WatermarkPackage,
    ctx: &'a AttackContext,
    trigger_images: Tensor,
    trigger_labels: Vec<usize>,
}

impl<'a> Probe<'a> {
    fn new(pkg: &'a WatermarkPackage, ctx: &'a AttackContext) -> Self {
        Probe {
            pkg,
            ctx,
            trigger_images: pkg.triggers.images(),
            trigger_labels: pkg.triggers.labels(),
        }
    }

    fn measure(&self, model: &Model) -> Result<(f64, f64)> {
        Ok((
            evaluate_accuracy(model, &self.ctx.test)?,
            accuracy(model, &self.trigger_images, &self.trigger_labels)?,
        ))
    }

    fn verify(&self, model: &Model) -> Result<VerificationResult> {
        verify(model, &self.ctx.evidence, &self.pkg.encoder, &self.ctx.verification)
    }
}

fn outcome(kind: AttackKind, model: Model, probe: &Probe, steps: Vec<f64>, normal: Vec<f64>, trig: Vec<f64>) -> Result<AttackOutcome> {
    Ok(AttackOutcome {
        kind,
        verification_after: probe.verify(&model)?,
        model_attacked: Some(model),
        steps,
        normal_acc_curve: normal,
        trigger_acc_curve: trig,
        forged_holdout_rate: None,
        normal_as_c_adv: None,
    })
}

/// Cross-entropy training on `data`, one curve point per epoch.
pub fn fine_tune_attack(
    pkg: &WatermarkPackage,
    ctx: &AttackContext,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let probe = Probe::new(pkg, ctx);
    let mut model = pkg.model.clone();
    let (n0, t0) = probe.measure(&model)?;
    let (mut steps, mut normal, mut trig) = (vec![0.0], vec![n0], vec![t0]);
    for epoch in 0..cfg.epochs {
        let one = cfg.with_epochs(1).with_seed(rng::derive_seed(cfg.seed, epoch as u64));
        if train(&mut model, data, &one)?.diverged {
            return Err(Error::Diverged {
                stage: format!("fine-tuning epoch {epoch}"),
            });
        }
        let (n, t) = probe.measure(&model)?;
        steps.push((epoch + 1) as f64);
        normal.push(n);
        trig.push(t);
    }
    outcome(AttackKind::FineTune, model, &probe, steps, normal, trig)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    /// Target class; `None` means `C - 1`.
    pub c_adv: Option<usize>,
    /// Forged triggers; `None` means `10 N`.
    pub w: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Fresh forged triggers used to measure generalisation of the attack.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            c_adv: None,
            w: None,
            epochs: 10,
            learning_rate: 0.003,
            batch_size: 32,
            holdout: 200,
            seed: 0,
        }
    }
}

/// Images of `count` uniformly random codes.
pub fn forge_triggers(encoder: &dyn TriggerEncoder, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng::stream(seed, 0xF0F6);
    (0..count)
        .map(|_| {
            let mut bytes = [0u8; CODE_LEN];
            r.fill_bytes(&mut bytes);
            encoder.encode(&Code::from_bytes(bytes))
        })
        .collect()
}

/// Tunes the model to send forged triggers (the attacker knows the encoder,
/// not the key) to `c_adv`. When `data` is given the attacker also keeps
/// training on it so normal accuracy is preserved; an epoch then covers the
/// forged triggers and `data` together.
pub fn adversarial_tune_attack(
    pkg: &WatermarkPackage,
    ctx: &AttackContext,
    data: Option<&Dataset>,
    cfg: &AdversarialConfig,
) -> Result<AttackOutcome> {
    let classes = pkg.model.num_classes();
    let c_adv = cfg.c_adv.unwrap_or(classes - 1);
    if c_adv >= classes {
        return Err(Error::param(format!("c_adv = {c_adv} but the model has {classes} classes")));
    }
    let w = cfg.w.unwrap_or(10 * pkg.triggers.len());
    let tc = TrainConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        epochs: 1,
        seed: cfg.seed,
    };
    tc.validate()?;
    let probe = Probe::new(pkg, ctx);
    let mut model = pkg.model.clone();
    let (n0, t0) = probe.measure(&model)?;
    let (mut steps, mut normal, mut trig) = (vec![0.0], vec![n0], vec![t0]);
    let shape = pkg.encoder.image_shape();

    let forged = forge_triggers(&pkg.encoder, w, rng::derive_seed(cfg.seed, 1));
    let mut images: Vec<f32> = forged.concat();
    let mut labels = vec![c_adv; w];
    if let Some(d) = data {
        images.extend_from_slice(d.images().data());
        labels.extend_from_slice(d.labels());
    }
    let rows = labels.len();
    let epochs = if w == 0 { 0 } else { cfg.epochs };
    if rows > 0 && epochs > 0 {
        let mut dims = vec![rows];
        dims.extend_from_slice(&shape);
        let set = Dataset::new(Tensor::new(dims, images)?, labels, classes)?;
        for epoch in 0..epochs {
            let one = tc.with_seed(rng::derive_seed(cfg.seed, 0x100 + epoch as u64));
            if train(&mut model, &set, &one)?.diverged {
                return Err(Error::Diverged {
                    stage: format!("adversarial tuning epoch {epoch}"),
                });
            }
            let (n, t) = probe.measure(&model)?;
            steps.push((epoch + 1) as f64);
            normal.push(n);
            trig.push(t);
        }
    }

    let holdout = forge_triggers(&pkg.encoder, cfg.holdout, rng::derive_seed(cfg.seed, 2));
    let rate = |images: &Tensor| -> Result<f64> {
        let pred = model.predict(images)?;
        Ok(pred.iter().filter(|&&p| p == c_adv).count() as f64 / pred.len().max(1) as f64)
    };
    let forged_holdout_rate = if holdout.is_empty() {
        None
    } else {
        Some(rate(&Tensor::stack(&shape, &holdout)?)?)
    };
    let normal_as_c_adv = Some(rate(ctx.test.images())?);
    let mut out = outcome(AttackKind::AdversarialTune, model, &probe, steps, normal, trig)?;
    out.forged_holdout_rate = forged_holdout_rate;
    out.normal_as_c_adv = normal_as_c_adv;
    Ok(out)
}

/// Zeroes the `floor(fraction * W)` weights of smallest magnitude across all
/// layers (biases are left alone). Ties break by parameter order.
pub fn prune_global(model: &Model, fraction: f64) -> Result<Model> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::param(format!("prune fraction must lie in [0, 1), got {fraction}")));
    }
    let mut pruned = model.clone();
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (li, p) in model.params().iter().enumerate() {
        all.extend(p.weight.data().iter().enumerate().map(|(i, w)| (w.abs(), li, i)));
    }
    let k = (fraction * all.len() as f64).floor() as usize;
    if k == 0 {
        return Ok(pruned);
    }
    all.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let params = pruned.params_mut();
    for &(_, li, i) in &all[..k] {
        params[li].weight.data_mut()[i] = 0.0;
    }
    Ok(pruned)
}

/// One outcome per fraction; `fractions` must be ascending.
pub fn prune_attack(pkg: &WatermarkPackage, ctx: &AttackContext, fractions: &[f64]) -> Result<Vec<AttackOutcome>> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::param("prune fractions must be sorted ascending"));
    }
    let probe = Probe::new(pkg, ctx);
    fractions
        .iter()
        .map(|&f| {
            let model = prune_global(&pkg.model, f)?;
            let (n, t) = probe.measure(&model)?;
            outcome(AttackKind::Prune, model, &probe, vec![f], vec![n], vec![t])
        })
        .collect()
}

/// CSV with header `fraction,normal_acc,trigger_acc,decision` for a prune
/// sweep.
pub fn prune_csv(outcomes: &[AttackOutcome]) -> String {
    let mut out = String::from("fraction,normal_acc,trigger_acc,decision\n");
    for o in outcomes {
        let _ = writeln!(
            out,
            "{},{},{},{:?}",
            o.steps[0],
            o.final_normal_acc(),
            o.final_trigger_acc(),
            o.verification_after.decision
        );
    }
    out
}

/// Normal-accuracy loss (relative to `clean_acc`) at the first pruning
/// fraction whose trigger accuracy falls below `1/C`; `None` if no fraction
/// in the sweep gets there.
pub fn sacrifice(outcomes: &[AttackOutcome], clean_acc: f64, num_classes: usize) -> Option<f64> {
    let chance = 1.0 / num_classes as f64;
    outcomes
        .iter()
        .find(|o| o.final_trigger_acc() < chance)
        .map(|o| clean_acc - o.final_normal_acc())
}

/// The default pruning sweep.
pub fn default_fractions() -> Vec<f64> {
    let mut f: Vec<f64> = (0..18).map(|i| i as f64 * 0.05).collect();
    f.extend([0.9, 0.92, 0.94, 0.95, 0.96, 0.97, 0.98, 0.99]);
    f
}
