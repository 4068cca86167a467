use serde::{Deserialize, Serialize};

use super::loss::LossSpec;
use super::model::{Gradients, Model};
use super::tensor::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

/// Plain minibatch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean loss per epoch.
    pub epoch_loss: Vec<f32>,
    /// Running accuracy on class targets per epoch (NaN if there are none).
    pub epoch_accuracy: Vec<f32>,
    pub steps: usize,
    /// Set when a non-finite loss stopped training; parameters are left at
    /// the last finite update.
    pub diverged: bool,
}

/// `params <- params - lr * grads`.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f32) -> Result<()> {
    if grads.params.len() != model.params().len() {
        return Err(Error::shape("gradients come from a different topology"));
    }
    for (p, g) in model.params_mut().iter_mut().zip(&grads.params) {
        if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
            return Err(Error::shape("gradient tensor shape mismatch"));
        }
        for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= lr * d;
        }
        for (b, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= lr * d;
        }
    }
    Ok(())
}

/// Cross-entropy training on a labelled dataset.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    fit(model, data.images(), &LossSpec::cross_entropy(data.labels()), cfg)
}

/// Minibatch SGD over arbitrary per-sample targets. Each epoch visits the
/// samples in an order drawn from the `(seed, epoch)` stream.
pub fn fit(model: &mut Model, inputs: &Tensor, loss: &LossSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let n = inputs.batch_len();
    if loss.len() != n {
        return Err(Error::shape(format!("{} targets for {n} inputs", loss.len())));
    }
    let class_targets = loss
        .targets()
        .iter()
        .filter(|t| matches!(t, super::loss::Target::Class(_)))
        .count();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, 1 + epoch as u64);
        let order = rng::permutation(&mut r, n);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let x = inputs.select(batch_idx);
            let spec = loss.select(batch_idx);
            let (l, grads, hits) = match model.grad_counting(&x, &spec, Exec::default(), false) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    report.diverged = true;
                    return Ok(report);
                }
                Err(e) => return Err(e),
            };
            if !l.is_finite() {
                report.diverged = true;
                return Ok(report);
            }
            sgd_step(model, &grads, cfg.learning_rate)?;
            report.steps += 1;
            loss_sum += f64::from(l) * batch_idx.len() as f64;
            correct += hits;
        }
        report
            .epoch_loss
            .push(if n == 0 { 0.0 } else { (loss_sum / n as f64) as f32 });
        report.epoch_accuracy.push(if class_targets == 0 {
            f32::NAN
        } else {
            correct as f32 / class_targets as f32
        });
    }
    Ok(report)
}

/// Fraction of images whose argmax prediction equals the label.
pub fn accuracy(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict(images)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    accuracy(model, data.images(), data.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn toy_two_class(n: usize, seed: u64) -> Dataset {
        let mut r = rng::stream(seed, 3);
        let noise = rng::standard_normal(&mut r, n * 4);
        let mut data = Vec::with_capacity(n * 4);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { 0.25 } else { 0.75 };
            for j in 0..4 {
                data.push(center + 0.05 * noise[i * 4 + j]);
            }
            labels.push(label);
        }
        Dataset::new(Tensor::new(vec![n, 1, 2, 2], data).unwrap(), labels, 2).unwrap()
    }

    fn small_net(seed: u64) -> Model {
        Model::new(
            vec![1, 2, 2],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 4, output: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 8, output: 2 },
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let data = toy_two_class(20, 1);
        let mut m = small_net(2);
        let before = m.clone();
        let rep = train(&mut m, &data, &TrainConfig::default().with_epochs(0)).unwrap();
        assert_eq!(m, before);
        assert!(rep.epoch_loss.is_empty());
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = toy_two_class(200, 5);
        let mut m = small_net(6);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 16,
            epochs: 50,
            seed: 7,
        };
        train(&mut m, &data, &cfg).unwrap();
        assert!(evaluate_accuracy(&m, &data).unwrap() >= 0.99);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let data = toy_two_class(64, 8);
        let cfg = TrainConfig {
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (small_net(1), small_net(1));
        train(&mut a, &data, &cfg).unwrap();
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_step_is_identity() {
        let data = toy_two_class(8, 2);
        let mut m = small_net(3);
        let before = m.clone();
        let (_, g) = m
            .grad(data.images(), &LossSpec::cross_entropy(data.labels()))
            .unwrap();
        sgd_step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn one_step_reduces_loss() {
        let data = toy_two_class(32, 4);
        let mut m = small_net(9);
        let spec = LossSpec::cross_entropy(data.labels());
        let (l0, g) = m.grad(data.images(), &spec).unwrap();
        sgd_step(&mut m, &g, 0.01).unwrap();
        let (l1, _) = m.grad(data.images(), &spec).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn two_steps_match_reference_loop() {
        // reference: re-evaluate the gradient after each manual update
        let data = toy_two_class(16, 12);
        let spec = LossSpec::cross_entropy(data.labels());
        let mut reference = small_net(13);
        for _ in 0..2 {
            let (_, g) = reference.grad(data.images(), &spec).unwrap();
            for (p, gp) in reference.params_mut().iter_mut().zip(&g.params) {
                for (w, d) in p.weight.data_mut().iter_mut().zip(gp.weight.data()) {
                    *w -= 0.05 * d;
                }
                for (b, d) in p.bias.data_mut().iter_mut().zip(gp.bias.data()) {
                    *b -= 0.05 * d;
                }
            }
        }
        let mut m = small_net(13);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 2,
            seed: 0,
        };
        train(&mut m, &data, &cfg).unwrap();
        for (a, b) in m.params().iter().zip(reference.params()) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn divergence_is_reported_not_panicked() {
        let data = toy_two_class(16, 1);
        let mut m = small_net(1);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            batch_size: 4,
            epochs: 5,
            seed: 0,
        };
        let rep = train(&mut m, &data, &cfg).unwrap();
        assert!(rep.diverged);
    }

    #[test]
    fn empty_dataset_accuracy_is_an_error() {
        let m = small_net(1);
        let images = Tensor::zeros(vec![0, 1, 2, 2]);
        assert!(matches!(accuracy(&m, &images, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
