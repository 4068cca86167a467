//! Data-free distillation.
//!
//! A generator and a student are trained adversarially against a frozen
//! teacher: the generator moves its images toward inputs where the student
//! and teacher logits differ most (l1), the student closes that gap on fresh
//! latents. The generator's images ("anchors") then stand in for the
//! teacher's unavailable training data.
//!
//! This is a deliberately small loop (plain SGD, fixed alternation), not a
//! reproduction of any particular published system.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::ImageShape;
use crate::error::{Error, Result};
use crate::nn::{self, checkpoint, LayerSpec, LossSpec, Model, Tensor};
use crate::rng;

pub const DEFAULT_LATENT_DIM: usize = 64;
const HIDDEN: usize = 256;

/// Latent-to-image network: `dense(latent->256) -> relu -> dense(->pixels)
/// -> sigmoid`, reshaped to `image_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    latent_dim: usize,
    image_shape: ImageShape,
    net: Model,
}

impl Generator {
    pub fn new(latent_dim: usize, image_shape: ImageShape, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::param("latent_dim must be positive"));
        }
        let pixels: usize = image_shape.iter().product();
        let net = Model::new(
            vec![latent_dim],
            vec![
                LayerSpec::Dense {
                    input: latent_dim,
                    output: HIDDEN,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: HIDDEN,
                    output: pixels,
                },
                LayerSpec::Sigmoid,
            ],
            seed,
        )?;
        Ok(Generator {
            latent_dim,
            image_shape,
            net,
        })
    }

    pub fn from_net(net: Model, image_shape: ImageShape) -> Result<Self> {
        if net.input_shape().len() != 1 {
            return Err(Error::shape("generator input must be a flat latent vector"));
        }
        if net.num_classes() != image_shape.iter().product::<usize>() {
            return Err(Error::shape("generator output width does not match image shape"));
        }
        Ok(Generator {
            latent_dim: net.input_shape()[0],
            image_shape,
            net,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    pub fn net(&self) -> &Model {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Model {
        &mut self.net
    }

    /// Images `[B, c, h, w]` in `[0, 1]` for latents `[B, latent_dim]`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let flat = self.net.forward(z)?;
        let b = flat.batch_len();
        let mut data = flat.into_data();
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&self.image_shape);
        Tensor::new(shape, data)
    }

    /// `count` standard-normal latents.
    pub fn sample_latents(&self, count: usize, r: &mut rng::Rng) -> Tensor {
        Tensor::new(
            vec![count, self.latent_dim],
            rng::standard_normal(r, count * self.latent_dim),
        )
        .expect("latent shape")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.net, Some(self.image_shape))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let shape = ck.image_shape.ok_or_else(|| {
            Error::format(format!("{} is not a generator checkpoint", path.display()))
        })?;
        Generator::from_net(ck.model, shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub latent_dim: usize,
    /// Student updates; one generator update precedes every
    /// `student_per_generator` of them.
    pub steps: usize,
    pub batch_size: usize,
    pub student_lr: f32,
    pub generator_lr: f32,
    pub student_per_generator: usize,
    /// Weight of the batch class-balance entropy the generator also
    /// maximizes; 0 gives the plain discrepancy objective, which tends to
    /// collapse onto one or two teacher classes.
    pub balance_weight: f32,
    /// Softmax temperature of the balance term. Confident teachers saturate
    /// the plain softmax and starve the term of gradient.
    pub balance_temperature: f32,
    pub seed: u64,
    /// Teacher test accuracy, if known; used only to warn when the teacher
    /// is at chance level.
    pub teacher_accuracy: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            latent_dim: DEFAULT_LATENT_DIM,
            steps: 2000,
            batch_size: 64,
            student_lr: 0.1,
            generator_lr: 0.1,
            student_per_generator: 5,
            balance_weight: 20.0,
            balance_temperature: 10.0,
            seed: 0,
            teacher_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean l1 logit discrepancy of each student batch before its update.
    pub student_discrepancy: Vec<f32>,
    /// Discrepancy each generator step ascended from.
    pub generator_discrepancy: Vec<f32>,
    pub diverged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Distillation {
    pub generator: Generator,
    pub student: Model,
    pub report: DistillReport,
}

/// Adversarial distillation of `teacher` into a fresh student of the same
/// architecture. The teacher is never modified.
pub fn distill(teacher: &Model, cfg: &DistillConfig) -> Result<Distillation> {
    if cfg.steps == 0 {
        return Err(Error::param("distillation needs steps >= 1"));
    }
    if cfg.batch_size == 0 || cfg.student_per_generator == 0 {
        return Err(Error::param("batch size and alternation period must be positive"));
    }
    let image_shape: ImageShape = teacher
        .input_shape()
        .try_into()
        .map_err(|_| Error::shape("teacher input must be [c, h, w]"))?;
    let generator = Generator::new(cfg.latent_dim, image_shape, rng::derive_seed(cfg.seed, 1))?;
    let student = Model::new(
        teacher.input_shape().to_vec(),
        teacher.layers().to_vec(),
        rng::derive_seed(cfg.seed, 2),
    )?;
    distill_from(teacher, generator, student, cfg)
}

/// Runs the adversarial loop from a given generator/student pair.
pub fn distill_from(
    teacher: &Model,
    mut generator: Generator,
    mut student: Model,
    cfg: &DistillConfig,
) -> Result<Distillation> {
    let classes = teacher.num_classes();
    let mut report = DistillReport::default();
    if let Some(acc) = cfg.teacher_accuracy {
        if acc <= 1.0 / classes as f64 + 0.02 {
            report.warnings.push(format!(
                "teacher accuracy {acc:.3} is at chance level; distillation is vacuous"
            ));
        }
    }
    let mut r = rng::stream(cfg.seed, 0xD15_7111);
    let b = cfg.batch_size;
    let scale = 1.0 / (b * classes) as f32;

    for step in 0..cfg.steps {
        if step % cfg.student_per_generator == 0 {
            let z = generator.sample_latents(b, &mut r);
            match generator_step(teacher, &mut generator, &student, &z, scale, cfg) {
                Ok(d) => report.generator_discrepancy.push(d),
                Err(Error::NonFinite { .. }) => {
                    report.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let z = generator.sample_latents(b, &mut r);
        let images = generator.generate(&z)?;
        let target = teacher.forward(&images)?;
        let loss = LossSpec::l1_to(&target, 1.0 / classes as f32);
        match student.grad(&images, &loss) {
            Ok((l, g)) if l.is_finite() => {
                nn::sgd_step(&mut student, &g, cfg.student_lr)?;
                report.student_discrepancy.push(l);
            }
            Ok(_) | Err(Error::NonFinite { .. }) => {
                report.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Distillation {
        generator,
        student,
        report,
    })
}

/// One ascent step of the generator on the mean l1 discrepancy.
fn generator_step(
    teacher: &Model,
    generator: &mut Generator,
    student: &Model,
    z: &Tensor,
    scale: f32,
    cfg: &DistillConfig,
) -> Result<f32> {
    let images = generator.generate(z)?;
    let t = teacher.forward(&images)?;
    let s = student.forward(&images)?;
    let discrepancy = nn::l1_logits(&s, &t)?;
    let ds: Vec<f32> = s
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| scale * sign(a - b))
        .collect();
    let mut dt: Vec<f32> = ds.iter().map(|v| -v).collect();
    if cfg.balance_weight != 0.0 {
        for (d, e) in dt.iter_mut().zip(balance_entropy_grad(&t, cfg.balance_temperature)) {
            *d += cfg.balance_weight * e;
        }
    }
    let ds = Tensor::new(s.shape().to_vec(), ds)?;
    let dt = Tensor::new(t.shape().to_vec(), dt)?;
    let gs = student.backprop(&images, &ds)?;
    let gt = teacher.backprop(&images, &dt)?;
    let dimg: Vec<f32> = gs
        .input
        .data()
        .iter()
        .zip(gt.input.data())
        .map(|(a, b)| a + b)
        .collect();
    let dflat = Tensor::new(vec![z.batch_len(), generator.net.num_classes()], dimg)?;
    let gg = generator.net.backprop(z, &dflat)?;
    // ascent
    nn::sgd_step(&mut generator.net, &gg, -cfg.generator_lr)?;
    Ok(discrepancy)
}

/// Gradient w.r.t. the logits of `H(mean_i softmax(t_i / temp))`.
fn balance_entropy_grad(t: &Tensor, temp: f32) -> Vec<f32> {
    let (b, c) = (t.batch_len(), t.sample_len());
    let soft: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let scaled: Vec<f32> = t.sample(i).iter().map(|v| v / temp).collect();
            nn::softmax(&scaled)
        })
        .collect();
    let mut mean = vec![0.0f64; c];
    for s in &soft {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / b as f64;
        }
    }
    let g: Vec<f64> = mean.iter().map(|m| -(m.max(1e-12).ln() + 1.0)).collect();
    let mut out = Vec::with_capacity(b * c);
    for s in &soft {
        let dot: f64 = s.iter().zip(&g).map(|(a, b)| a * b).sum();
        out.extend(
            s.iter()
                .zip(&g)
                .map(|(sj, gj)| (sj * (gj - dot) / (b as f64 * f64::from(temp))) as f32),
        );
    }
    out
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Generated images with the teacher's logits and argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub images: Tensor,
    pub logits: Tensor,
    pub labels: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn sample_anchors(gen: &Generator, teacher: &Model, count: usize, seed: u64) -> Result<AnchorSet> {
    if count == 0 {
        return Err(Error::param("anchor count must be at least 1"));
    }
    let mut r = rng::stream(seed, 0xA4C4);
    let z = gen.sample_latents(count, &mut r);
    let images = gen.generate(&z)?;
    let logits = teacher.forward(&images)?;
    let labels = (0..count).map(|i| nn::argmax(logits.sample(i))).collect();
    Ok(AnchorSet {
        images,
        logits,
        labels,
    })
}

/// Fraction of fresh anchors on which `student` and `teacher` agree (argmax).
pub fn agreement(gen: &Generator, teacher: &Model, student: &Model, count: usize, seed: u64) -> Result<f64> {
    let anchors = sample_anchors(gen, teacher, count, seed)?;
    let pred = student.predict(&anchors.images)?;
    let same = pred.iter().zip(&anchors.labels).filter(|(a, b)| a == b).count();
    Ok(same as f64 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::desk_classifier;

    fn teacher() -> Model {
        Model::new(vec![1, 8, 8], desk_classifier(&[1, 8, 8], 4).unwrap(), 5).unwrap()
    }

    fn batch_entropy(t: &Tensor, temp: f32) -> f64 {
        let b = t.batch_len();
        let mut mean = vec![0.0; t.sample_len()];
        for i in 0..b {
            let scaled: Vec<f32> = t.sample(i).iter().map(|v| v / temp).collect();
            for (m, v) in mean.iter_mut().zip(nn::softmax(&scaled)) {
                *m += v / b as f64;
            }
        }
        -mean.iter().map(|m| m * m.ln()).sum::<f64>()
    }

    #[test]
    fn balance_gradient_matches_finite_differences() {
        let mut r = rng::stream(4, 4);
        let t = Tensor::new(vec![3, 4], rng::standard_normal(&mut r, 12)).unwrap();
        for temp in [1.0, 3.0] {
            let g = balance_entropy_grad(&t, temp);
            for (k, &gk) in g.iter().enumerate() {
                let (mut a, mut b) = (t.clone(), t.clone());
                a.data_mut()[k] += 1e-3;
                b.data_mut()[k] -= 1e-3;
                let fd = (batch_entropy(&a, temp) - batch_entropy(&b, temp)) / 2e-3;
                assert!((fd - f64::from(gk)).abs() < 1e-4, "{k}: {fd} vs {gk}");
            }
        }
    }

    #[test]
    fn generator_output_in_unit_range() {
        let g = Generator::new(16, [1, 8, 8], 3).unwrap();
        let mut r = rng::stream(1, 1);
        let img = g.generate(&g.sample_latents(5, &mut r)).unwrap();
        assert_eq!(img.shape(), &[5, 1, 8, 8]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn anchors_are_deterministic_and_labelled_by_argmax() {
        let t = teacher();
        let g = Generator::new(16, [1, 8, 8], 3).unwrap();
        let a = sample_anchors(&g, &t, 20, 9).unwrap();
        assert_eq!(a, sample_anchors(&g, &t, 20, 9).unwrap());
        for i in 0..a.len() {
            assert_eq!(a.labels[i], nn::argmax(a.logits.sample(i)));
        }
        // stored logits reproduce a fresh teacher pass exactly
        assert_eq!(t.forward(&a.images).unwrap(), a.logits);
        assert!(sample_anchors(&g, &t, 0, 9).is_err());
    }

    #[test]
    fn zero_steps_is_rejected() {
        let cfg = DistillConfig {
            steps: 0,
            ..DistillConfig::default()
        };
        assert!(distill(&teacher(), &cfg).is_err());
    }

    #[test]
    fn student_equal_to_teacher_stays_put() {
        let t = teacher();
        let g = Generator::new(16, [1, 8, 8], 3).unwrap();
        let cfg = DistillConfig {
            latent_dim: 16,
            steps: 10,
            batch_size: 8,
            ..DistillConfig::default()
        };
        let out = distill_from(&t, g, t.clone(), &cfg).unwrap();
        assert_eq!(out.student, t);
        assert!(out.report.student_discrepancy.iter().all(|&d| d == 0.0));
        assert!(out.report.generator_discrepancy.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn teacher_is_read_only() {
        let t = teacher();
        let before = t.clone();
        let cfg = DistillConfig {
            latent_dim: 8,
            steps: 6,
            batch_size: 4,
            ..DistillConfig::default()
        };
        distill(&t, &cfg).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn chance_teacher_warns() {
        let cfg = DistillConfig {
            latent_dim: 8,
            steps: 1,
            batch_size: 2,
            teacher_accuracy: Some(0.25),
            ..DistillConfig::default()
        };
        let out = distill(&teacher(), &cfg).unwrap();
        assert_eq!(out.report.warnings.len(), 1);
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Generator::new(12, [1, 8, 8], 4).unwrap();
        let p = dir.path().join("g.wmdl");
        g.save(&p).unwrap();
        assert_eq!(Generator::load(&p).unwrap(), g);
        assert!(Model::load(&p).is_err());
    }
}
