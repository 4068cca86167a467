//! Post-trigger generation and watermark injection.
//!
//! A post-trigger starts as the encoder's trigger image and is pulled
//! toward pixels that a clean model, briefly fine-tuned on the trigger and
//! then on anchors, still assigns to the trigger's label; a proximity term
//! keeps it near the original. Injection then fine-tunes a copy of the clean
//! model on the (post-)triggers, optionally alongside anchors (logit `l1`
//! to the clean model) or real training samples (plain cross-entropy).

use serde::{Deserialize, Serialize};

use crate::codec::{EncoderSpec, TriggerSet};
use crate::data::Dataset;
use crate::dfd::{sample_anchors, Generator};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{self, LossSpec, Model, Target, Tensor, TrainConfig};
use crate::package::{PackageMeta, WatermarkPackage};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostTriggerConfig {
    /// Weight of `||P - T||_2^2`.
    pub lambda1: f32,
    /// Outer iterations.
    pub q: usize,
    /// Anchors per iteration.
    pub r: usize,
    pub pixel_steps: usize,
    pub pixel_lr: f32,
    /// Epochs of each inner fine-tune (on the post-trigger, then on anchors).
    pub finetune_epochs: usize,
    pub finetune_lr: f32,
}

impl Default for PostTriggerConfig {
    fn default() -> Self {
        PostTriggerConfig {
            lambda1: 0.5,
            q: 30,
            r: 100,
            pixel_steps: 20,
            pixel_lr: 0.05,
            finetune_epochs: 2,
            finetune_lr: 0.05,
        }
    }
}

impl PostTriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::param("post-trigger generation needs R >= 1 anchors"));
        }
        if !(self.pixel_lr > 0.0 && self.pixel_lr.is_finite()) {
            return Err(Error::param("pixel_lr must be positive"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::param("lambda1 must be a finite non-negative number"));
        }
        if !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::param("finetune_lr must be positive"));
        }
        Ok(())
    }

    fn finetune(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.finetune_lr,
            batch_size: 32,
            epochs: self.finetune_epochs,
            seed,
        }
    }
}

/// Optimizes every trigger of `triggers` jointly: each outer iteration
/// fine-tunes one clean copy on all current post-triggers, then on `R`
/// anchors, and takes the pixel steps for all images against that model.
///
/// Cheaper than per-trigger generation by a factor of about `N`; with a
/// single trigger the two coincide.
pub fn generate_post_triggers(
    clean: &Model,
    gen: &Generator,
    triggers: &TriggerSet,
    cfg: &PostTriggerConfig,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    cfg.validate()?;
    if triggers.is_empty() {
        return Ok(Vec::new());
    }
    if clean.input_shape() != triggers.image_shape {
        return Err(Error::shape("trigger shape does not match the model input"));
    }
    let originals = triggers.images();
    let labels = triggers.labels();
    let mut p = originals.clone();
    for q in 0..cfg.q {
        let q_seed = rng::derive_seed(seed, q as u64);
        let mut tuned = clean.clone();
        let rep = nn::train(
            &mut tuned,
            &Dataset::new(p.clone(), labels.clone(), clean.num_classes())?,
            &cfg.finetune(rng::derive_seed(q_seed, 1)),
        )?;
        if rep.diverged {
            return Err(Error::Diverged {
                stage: format!("post-trigger fine-tune at q={q}"),
            });
        }
        let anchors = sample_anchors(gen, clean, cfg.r, rng::derive_seed(q_seed, 2))?;
        let rep = nn::train(
            &mut tuned,
            &Dataset::new(anchors.images, anchors.labels, clean.num_classes())?,
            &cfg.finetune(rng::derive_seed(q_seed, 3)),
        )?;
        if rep.diverged {
            return Err(Error::Diverged {
                stage: format!("anchor fine-tune at q={q}"),
            });
        }
        pixel_descent(&tuned, &mut p, &originals, &labels, cfg)?;
    }
    let n = p.batch_len();
    Ok((0..n).map(|i| p.sample(i).to_vec()).collect())
}

/// Algorithm for one trigger image; see [`generate_post_triggers`].
pub fn generate_post_trigger(
    clean: &Model,
    gen: &Generator,
    trigger: &[f32],
    label: usize,
    cfg: &PostTriggerConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    let shape: crate::codec::ImageShape = clean
        .input_shape()
        .try_into()
        .map_err(|_| Error::shape("model input must be [c, h, w]"))?;
    if trigger.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("trigger length does not match the model input"));
    }
    let single = TriggerSet {
        image_shape: shape,
        rows: vec![crate::codec::TriggerRow {
            code: crate::codec::Code::from_bytes([0; 32]),
            image: trigger.to_vec(),
            label,
        }],
    };
    Ok(generate_post_triggers(clean, gen, &single, cfg, seed)?.remove(0))
}

/// Per-trigger generation of a whole set, fanned out over `exec`.
pub fn generate_post_triggers_separately(
    clean: &Model,
    gen: &Generator,
    triggers: &TriggerSet,
    cfg: &PostTriggerConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<f32>>> {
    exec.map(triggers.len(), |i| {
        let row = &triggers.rows[i];
        generate_post_trigger(clean, gen, &row.image, row.label, cfg, rng::derive_seed(seed, 1000 + i as u64))
    })
    .into_iter()
    .collect()
}

/// `pixel_steps` iterations of: a cross-entropy gradient step on the image,
/// the exact proximal step for `lambda1 * ||P - T||^2`, then clamping.
fn pixel_descent(
    model: &Model,
    p: &mut Tensor,
    originals: &Tensor,
    labels: &[usize],
    cfg: &PostTriggerConfig,
) -> Result<()> {
    let spec = LossSpec::cross_entropy(labels);
    let n = labels.len() as f32;
    let shrink = 1.0 / (1.0 + 2.0 * cfg.pixel_lr * cfg.lambda1);
    let pull = 2.0 * cfg.pixel_lr * cfg.lambda1;
    for _ in 0..cfg.pixel_steps {
        // the loss is a batch mean; rescale to per-image gradients
        let (_, g) = model.grad(p, &spec)?;
        for ((v, d), t) in p.data_mut().iter_mut().zip(g.input.data()).zip(originals.data()) {
            let stepped = *v - cfg.pixel_lr * n * d;
            *v = ((stepped + pull * t) * shrink).clamp(0.0, 1.0);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Triggers only.
    Solely,
    /// Triggers plus `S` real training samples under cross-entropy.
    WithTrainingData,
    /// Triggers plus `S` fresh anchors per epoch matched to clean logits.
    WithAnchors,
}

impl Scheme {
    pub fn letter(self) -> char {
        match self {
            Scheme::Solely => 'B',
            Scheme::WithTrainingData => 'D',
            Scheme::WithAnchors => 'A',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backdoor {
    Trigger,
    PostTrigger,
}

impl Backdoor {
    pub fn letter(self) -> char {
        match self {
            Backdoor::Trigger => 'T',
            Backdoor::PostTrigger => 'P',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionConfig {
    pub scheme: Scheme,
    pub backdoor: Backdoor,
    pub lambda2: f32,
    /// Anchor / training-sample count; `None` means `10 * N`.
    pub s: Option<usize>,
    pub trigger_acc_target: f64,
    pub max_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub post: PostTriggerConfig,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            scheme: Scheme::WithAnchors,
            backdoor: Backdoor::PostTrigger,
            lambda2: 5.0,
            s: None,
            trigger_acc_target: 0.9,
            max_epochs: 400,
            learning_rate: 0.003,
            batch_size: 32,
            post: PostTriggerConfig::default(),
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.trigger_acc_target > 0.0 && self.trigger_acc_target <= 1.0) {
            return Err(Error::param("trigger_acc_target must be in (0, 1]"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::param("lambda2 must be a finite non-negative number"));
        }
        self.train(0).validate()?;
        if self.backdoor == Backdoor::PostTrigger {
            self.post.validate()?;
        }
        Ok(())
    }

    pub fn anchor_count(&self, n: usize) -> usize {
        self.s.unwrap_or(10 * n)
    }

    fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: 1,
            seed,
        }
    }
}

/// Largest per-pixel mean `l1` distance between a trigger and its
/// replacement image.
pub fn max_mean_l1(triggers: &TriggerSet, images: &[Vec<f32>]) -> f32 {
    triggers
        .rows
        .iter()
        .zip(images)
        .map(|(r, p)| mean_l1(&r.image, p))
        .fold(0.0, f32::max)
}

pub fn mean_l1(a: &[f32], b: &[f32]) -> f32 {
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).sum();
    (s / a.len() as f64) as f32
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| f64::from(x - y).powi(2))
        .sum::<f64>()
        .sqrt() as f32
}

/// Injects `triggers` (generated by `encoder`) into a copy of `clean`.
///
/// With `Backdoor::PostTrigger` the triggers are first turned into
/// post-triggers and those are injected; the fuzzy-match radius stored in
/// the package is the largest trigger/post-trigger mean `l1` distance.
pub fn inject(
    clean: &Model,
    triggers: &TriggerSet,
    encoder: &EncoderSpec,
    gen: Option<&Generator>,
    train_data: Option<&Dataset>,
    cfg: &InjectionConfig,
    seed: u64,
) -> Result<WatermarkPackage> {
    cfg.validate()?;
    let need_gen = cfg.scheme == Scheme::WithAnchors || cfg.backdoor == Backdoor::PostTrigger;
    if need_gen && gen.is_none() {
        return Err(Error::param("anchors or post-triggers requested without a generator"));
    }
    if cfg.scheme == Scheme::WithTrainingData && train_data.is_none() {
        return Err(Error::param("scheme D needs training data"));
    }
    let (injected, epsilon) = match cfg.backdoor {
        Backdoor::Trigger => (triggers.clone(), 0.0),
        Backdoor::PostTrigger => post_trigger_set(clean, gen.expect("checked above"), triggers, &cfg.post, seed)?,
    };
    inject_prepared(clean, &injected, epsilon, encoder, gen, train_data, cfg, seed)
}

/// Post-trigger copy of `triggers` and its fuzzy-match radius, as [`inject`]
/// builds them for `seed`.
pub fn post_trigger_set(
    clean: &Model,
    gen: &Generator,
    triggers: &TriggerSet,
    post: &PostTriggerConfig,
    seed: u64,
) -> Result<(TriggerSet, f32)> {
    let images = generate_post_triggers(clean, gen, triggers, post, rng::derive_seed(seed, 0x9057))?;
    let eps = max_mean_l1(triggers, &images);
    Ok((triggers.with_images(images)?, eps))
}

/// [`inject`] with the injected images already final, so one post-trigger
/// set can be shared across schemes.
#[allow(clippy::too_many_arguments)]
pub fn inject_prepared(
    clean: &Model,
    injected: &TriggerSet,
    epsilon: f32,
    encoder: &EncoderSpec,
    gen: Option<&Generator>,
    train_data: Option<&Dataset>,
    cfg: &InjectionConfig,
    seed: u64,
) -> Result<WatermarkPackage> {
    let (model, report) = embed(clean, injected, gen, train_data, cfg, seed)?;
    let meta = PackageMeta {
        scheme: cfg.scheme,
        backdoor: cfg.backdoor,
        n: injected.len(),
        num_classes: clean.num_classes(),
        epsilon,
        lambda1: cfg.post.lambda1,
        lambda2: cfg.lambda2,
        s: cfg.anchor_count(injected.len()),
        seed,
        encoder: encoder.descriptor(),
        below_target: report.below_target,
        trigger_accuracy: report.trigger_accuracy.last().copied().unwrap_or(1.0),
        epochs: report.epochs,
    };
    Ok(WatermarkPackage {
        model,
        triggers: injected.clone(),
        encoder: encoder.clone(),
        meta,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub epochs: usize,
    /// Trigger accuracy before training and after each epoch.
    pub trigger_accuracy: Vec<f64>,
    pub below_target: bool,
}

/// The fine-tuning half of [`inject`]: trains a copy of `clean` on the given
/// (already final) trigger images.
///
/// Each SGD step pairs a minibatch of triggers with a minibatch of the
/// auxiliary samples (anchors for scheme A, training samples for scheme D)
/// and descends `mean CE(triggers) + w * mean aux_loss`, where `w` is
/// `lambda2` with the anchor `l1_logits` loss and 1 with training-sample
/// cross-entropy. An epoch is one pass over the auxiliary samples (over the
/// triggers for scheme B); triggers cycle through their own permutation.
pub fn embed(
    clean: &Model,
    triggers: &TriggerSet,
    gen: Option<&Generator>,
    train_data: Option<&Dataset>,
    cfg: &InjectionConfig,
    seed: u64,
) -> Result<(Model, EmbedReport)> {
    cfg.validate()?;
    let mut model = clean.clone();
    let mut report = EmbedReport::default();
    let t_images = triggers.images();
    let t_labels = triggers.labels();
    let trigger_acc = |m: &Model| -> Result<f64> {
        if t_labels.is_empty() {
            Ok(1.0)
        } else {
            nn::accuracy(m, &t_images, &t_labels)
        }
    };
    let s = cfg.anchor_count(triggers.len());
    let real = match (cfg.scheme, train_data) {
        (Scheme::WithTrainingData, Some(d)) => {
            if d.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut r = rng::stream(seed, 0xD474);
            let take = s.min(d.len());
            let idx: Vec<usize> = rng::permutation(&mut r, d.len()).into_iter().take(take).collect();
            Some(d.subset(&idx))
        }
        (Scheme::WithTrainingData, None) => return Err(Error::param("scheme D needs training data")),
        _ => None,
    };
    let generator = match cfg.scheme {
        Scheme::WithAnchors => Some(gen.ok_or_else(|| Error::param("scheme A needs a generator"))?),
        _ => None,
    };
    let classes = clean.num_classes();
    let b = cfg.batch_size;
    let mut t_order: Vec<usize> = Vec::new();
    let mut t_cursor = 0usize;
    report.trigger_accuracy.push(trigger_acc(&model)?);
    let mut reached = report.trigger_accuracy[0] >= cfg.trigger_acc_target;
    while !reached && report.epochs < cfg.max_epochs {
        let epoch = report.epochs as u64;
        let mut r = rng::stream(seed, 0xE0C0 + epoch);
        // auxiliary pool for this epoch: (images, targets, weight)
        let aux: Option<(Tensor, Vec<Target>, f32)> = match cfg.scheme {
            Scheme::Solely => None,
            Scheme::WithTrainingData => {
                let d = real.as_ref().expect("built above");
                let targets = d.labels().iter().map(|&l| Target::Class(l)).collect();
                Some((d.images().clone(), targets, 1.0))
            }
            Scheme::WithAnchors => {
                let g = generator.expect("checked above");
                let images = g.generate(&g.sample_latents(s, &mut r))?;
                let reference = clean.forward(&images)?;
                let targets = (0..s).map(|i| Target::Logits(reference.sample(i).to_vec())).collect();
                // l1_logits is a mean over the C logits
                Some((images, targets, cfg.lambda2 / classes as f32))
            }
        };
        let aux_len = aux.as_ref().map_or(0, |a| a.1.len());
        if t_labels.is_empty() && aux_len == 0 {
            break;
        }
        let aux_order = rng::permutation(&mut r, aux_len);
        let steps = if aux_len > 0 {
            aux_len.div_ceil(b)
        } else {
            t_labels.len().div_ceil(b)
        };
        for step in 0..steps {
            let mut inputs: Vec<&[f32]> = Vec::with_capacity(2 * b);
            let mut targets = Vec::with_capacity(2 * b);
            let mut weights = Vec::with_capacity(2 * b);
            let t_take = b.min(t_labels.len());
            let mut t_idx = Vec::with_capacity(t_take);
            for _ in 0..t_take {
                if t_cursor == t_order.len() {
                    t_order = rng::permutation(&mut r, t_labels.len());
                    t_cursor = 0;
                }
                t_idx.push(t_order[t_cursor]);
                t_cursor += 1;
            }
            let a_idx = if aux_len > 0 {
                &aux_order[step * b..((step + 1) * b).min(aux_len)]
            } else {
                &[][..]
            };
            if t_idx.is_empty() && a_idx.is_empty() {
                continue;
            }
            let total = (t_idx.len() + a_idx.len()) as f32;
            // grad() averages over the whole batch; rescale so each part
            // contributes its own mean
            for &i in &t_idx {
                inputs.push(t_images.sample(i));
                targets.push(Target::Class(t_labels[i]));
                weights.push(total / t_idx.len() as f32);
            }
            if let Some((images, aux_targets, w)) = &aux {
                for &i in a_idx {
                    inputs.push(images.sample(i));
                    targets.push(aux_targets[i].clone());
                    weights.push(w * total / a_idx.len() as f32);
                }
            }
            let batch = Tensor::stack(clean.input_shape(), &inputs)?;
            let spec = LossSpec::new(targets, weights)?;
            let (loss, grads) = match model.grad(&batch, &spec) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        stage: format!("injection epoch {epoch}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: format!("injection epoch {epoch}"),
                });
            }
            nn::sgd_step(&mut model, &grads, cfg.learning_rate)?;
        }
        report.epochs += 1;
        let acc = trigger_acc(&model)?;
        report.trigger_accuracy.push(acc);
        reached = acc >= cfg.trigger_acc_target;
    }
    report.below_target = !reached;
    Ok((model, report))
}
