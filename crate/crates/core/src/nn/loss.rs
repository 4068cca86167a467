use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-sample training target.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Cross-entropy against a class index.
    Class(usize),
    /// `l1` distance (summed over logits) to reference logits.
    Logits(Vec<f32>),
}

/// A weighted target per batch sample. The batch loss is
/// `(1/B) * sum_i weight_i * loss_i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossSpec {
    targets: Vec<Target>,
    weights: Vec<f32>,
}

impl LossSpec {
    pub fn new(targets: Vec<Target>, weights: Vec<f32>) -> Result<Self> {
        if targets.len() != weights.len() {
            return Err(Error::shape(format!(
                "{} targets but {} weights",
                targets.len(),
                weights.len()
            )));
        }
        Ok(LossSpec { targets, weights })
    }

    pub fn cross_entropy(labels: &[usize]) -> Self {
        LossSpec {
            targets: labels.iter().map(|&l| Target::Class(l)).collect(),
            weights: vec![1.0; labels.len()],
        }
    }

    /// `l1` to reference logits (`[B, C]`), each sample weighted by `weight`.
    pub fn l1_to(reference: &Tensor, weight: f32) -> Self {
        let n = reference.batch_len();
        LossSpec {
            targets: (0..n)
                .map(|i| Target::Logits(reference.sample(i).to_vec()))
                .collect(),
            weights: vec![weight; n],
        }
    }

    pub fn push(&mut self, target: Target, weight: f32) {
        self.targets.push(target);
        self.weights.push(weight);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn select(&self, indices: &[usize]) -> LossSpec {
        LossSpec {
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Weighted loss of sample `i` and its gradient w.r.t. the logits.
    pub(crate) fn sample_loss(&self, i: usize, logits: &[f32]) -> Result<(f64, Vec<f32>)> {
        let w = self.weights[i];
        match &self.targets[i] {
            Target::Class(label) => {
                if *label >= logits.len() {
                    return Err(Error::param(format!(
                        "label {label} out of range for {} classes",
                        logits.len()
                    )));
                }
                let loss = log_sum_exp(logits) - f64::from(logits[*label]);
                let grad = softmax(logits)
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| {
                        let onehot = if c == *label { 1.0 } else { 0.0 };
                        (f64::from(w) * (pc - onehot)) as f32
                    })
                    .collect();
                Ok((f64::from(w) * loss, grad))
            }
            Target::Logits(reference) => {
                if reference.len() != logits.len() {
                    return Err(Error::shape("reference logits width mismatch"));
                }
                let mut loss = 0.0f64;
                let grad = logits
                    .iter()
                    .zip(reference)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        loss += f64::from(d.abs());
                        w * sign(d)
                    })
                    .collect();
                Ok((f64::from(w) * loss, grad))
            }
        }
    }
}

/// Sign with `sign(0) = 0`, so a model sitting exactly on its reference
/// receives no gradient.
pub(crate) fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_sum_exp(logits: &[f32]) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    max + logits
        .iter()
        .map(|&v| (f64::from(v) - max).exp())
        .sum::<f64>()
        .ln()
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    if logits.shape().len() != 2 || logits.batch_len() != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let c = logits.shape()[1];
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::param(format!("label {label} >= C={c}")));
        }
        let row = logits.sample(i);
        total += log_sum_exp(row) - f64::from(row[label]);
    }
    Ok((total / labels.len() as f64) as f32)
}

/// Mean absolute elementwise difference.
pub fn l1_logits(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "l1 operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum();
    Ok((sum / a.len() as f64) as f32)
}
