#![allow(dead_code)]

//! Test helpers: an independent f64 reference network used as a gradient
//! and forward-pass oracle.

use rand::Rng;
use wmark_core::nn::{LayerSpec, LossSpec, Model, Target, Tensor};
use wmark_core::rng;

/// Naive f64 re-implementation of the model's forward pass.
pub struct Reference {
    input: Vec<usize>,
    layers: Vec<LayerSpec>,
    pub params: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Reference {
    pub fn from_model(m: &Model) -> Self {
        Reference {
            input: m.input_shape().to_vec(),
            layers: m.layers().to_vec(),
            params: m
                .params()
                .iter()
                .map(|p| {
                    (
                        p.weight.data().iter().map(|&v| f64::from(v)).collect(),
                        p.bias.data().iter().map(|&v| f64::from(v)).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut shape = self.input.clone();
        let mut cur = x.to_vec();
        let mut slot = 0;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense { input, output } => {
                    let (w, b) = &self.params[slot];
                    slot += 1;
                    cur = (0..output)
                        .map(|o| b[o] + (0..input).map(|i| w[o * input + i] * cur[i]).sum::<f64>())
                        .collect();
                    shape = vec![output];
                }
                LayerSpec::Conv2d { in_channels, out_channels } => {
                    let (w, b) = &self.params[slot];
                    slot += 1;
                    let (h, wd) = (shape[1] as isize, shape[2] as isize);
                    let mut out = vec![0.0; out_channels * (h * wd) as usize];
                    for oc in 0..out_channels {
                        for y in 0..h {
                            for xx in 0..wd {
                                let mut s = b[oc];
                                for ic in 0..in_channels {
                                    for ky in 0..3isize {
                                        for kx in 0..3isize {
                                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                            if sy < 0 || sx < 0 || sy >= h || sx >= wd {
                                                continue;
                                            }
                                            let wi = ((oc * in_channels + ic) * 3 + ky as usize) * 3 + kx as usize;
                                            s += w[wi] * cur[(ic as isize * h * wd + sy * wd + sx) as usize];
                                        }
                                    }
                                }
                                out[(oc as isize * h * wd + y * wd + xx) as usize] = s;
                            }
                        }
                    }
                    cur = out;
                    shape = vec![out_channels, h as usize, wd as usize];
                }
                LayerSpec::Relu => cur.iter_mut().for_each(|v| *v = v.max(0.0)),
                LayerSpec::Sigmoid => cur.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
                LayerSpec::MaxPool2x2 => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut out = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let at = |di: usize, dj: usize| cur[ch * h * w + (2 * i + di) * w + 2 * j + dj];
                                out[ch * oh * ow + i * ow + j] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                            }
                        }
                    }
                    cur = out;
                    shape = vec![c, oh, ow];
                }
                LayerSpec::Flatten => shape = vec![cur.len()],
            }
        }
        cur
    }

    /// `(1/B) sum_i w_i loss_i`, matching `LossSpec` semantics.
    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[Target], weights: &[f32]) -> f64 {
        let mut total = 0.0;
        for ((x, t), &w) in inputs.iter().zip(targets).zip(weights) {
            let z = self.forward(x);
            let l = match t {
                Target::Class(c) => {
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[*c]
                }
                Target::Logits(r) => z.iter().zip(r).map(|(a, &b)| (a - f64::from(b)).abs()).sum(),
            };
            total += f64::from(w) * l;
        }
        total / inputs.len() as f64
    }
}

/// A small network touching every layer kind.
pub fn all_kinds_model(seed: u64) -> Model {
    let layers = vec![
        LayerSpec::Conv2d { in_channels: 2, out_channels: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_channels: 3, out_channels: 4 },
        LayerSpec::Sigmoid,
        LayerSpec::Flatten,
        LayerSpec::Dense { input: 36, output: 6 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 6, output: 4 },
    ];
    let mut m = Model::new(vec![2, 6, 6], layers, seed).unwrap();
    // non-zero biases so bias gradients are exercised away from symmetry
    let mut r = rng::stream(seed, 77);
    for p in m.params_mut() {
        for b in p.bias.data_mut() {
            *b = r.random_range(-0.1..0.1);
        }
    }
    m
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients (parameters and input) with central
/// differences of the f64 reference, mixing class and logit targets.
pub fn gradient_check(seed: u64, floor: f64) -> GradCheck {
    let model = all_kinds_model(seed);
    let mut r = rng::stream(seed, 78);
    let batch = 3;
    let xs: Vec<Vec<f32>> = (0..batch).map(|_| (0..72).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let targets = vec![
        Target::Class(r.random_range(0..4)),
        Target::Logits((0..4).map(|_| r.random_range(-2.0..2.0)).collect()),
        Target::Class(r.random_range(0..4)),
    ];
    let weights = vec![1.0, 0.7, 1.3];
    let spec = LossSpec::new(targets.clone(), weights.clone()).unwrap();
    let x = Tensor::stack(&[2, 6, 6], &xs).unwrap();
    let (_, grads) = model.grad(&x, &spec).unwrap();

    let mut reference = Reference::from_model(&model);
    let mut xs64: Vec<Vec<f64>> = xs.iter().map(|v| v.iter().map(|&a| f64::from(a)).collect()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for li in 0..reference.params.len() {
        for part in 0..2 {
            let len = if part == 0 { reference.params[li].0.len() } else { reference.params[li].1.len() };
            for i in 0..len {
                fn get(r: &mut Reference, li: usize, part: usize, i: usize) -> &mut f64 {
                    if part == 0 {
                        &mut r.params[li].0[i]
                    } else {
                        &mut r.params[li].1[i]
                    }
                }
                let orig = *get(&mut reference, li, part, i);
                *get(&mut reference, li, part, i) = orig + h;
                let up = reference.loss(&xs64, &targets, &weights);
                *get(&mut reference, li, part, i) = orig - h;
                let down = reference.loss(&xs64, &targets, &weights);
                *get(&mut reference, li, part, i) = orig;
                let numeric = (up - down) / (2.0 * h);
                let g = &grads.params[li];
                let analytic = f64::from(if part == 0 { g.weight.data()[i] } else { g.bias.data()[i] });
                worst = worst.max(rel_err(analytic, numeric, floor));
                checked += 1;
            }
        }
    }
    for s in 0..batch {
        for i in 0..72 {
            let orig = xs64[s][i];
            xs64[s][i] = orig + h;
            let up = reference.loss(&xs64, &targets, &weights);
            xs64[s][i] = orig - h;
            let down = reference.loss(&xs64, &targets, &weights);
            xs64[s][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = f64::from(grads.input.data()[s * 72 + i]);
            worst = worst.max(rel_err(analytic, numeric, floor));
            checked += 1;
        }
    }
    GradCheck {
        max_rel_err: worst,
        checked,
    }
}
