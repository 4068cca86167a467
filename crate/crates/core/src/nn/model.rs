use rand_distr::{Distribution, Normal};

use super::layer::{LayerSpec, KERNEL};
use super::loss::{LossSpec, Target};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::{Exec, SAMPLE_CHUNK};
use crate::rng;

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Param {
    fn zeros_like(other: &Param) -> Param {
        Param {
            weight: Tensor::zeros(other.weight.shape().to_vec()),
            bias: Tensor::zeros(other.bias.shape().to_vec()),
        }
    }

    fn add_assign(&mut self, other: &Param) {
        for (a, b) in self.weight.data_mut().iter_mut().zip(other.weight.data()) {
            *a += b;
        }
        for (a, b) in self.bias.data_mut().iter_mut().zip(other.bias.data()) {
            *a += b;
        }
    }
}

/// Parameter gradients (same layout as [`Model::params`]) plus the gradient
/// with respect to the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Param>,
    pub input: Tensor,
}

impl Gradients {
    pub fn max_abs(&self) -> f32 {
        self.params
            .iter()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Feed-forward network: an input shape, an ordered layer list and one
/// [`Param`] per dense/conv layer.
///
/// Cloning deep-copies the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    // activation shape entering each layer, plus the output shape last
    shapes: Vec<Vec<usize>>,
    // index into `params` for each layer
    param_slot: Vec<Option<usize>>,
}

/// Intermediate values kept from a single-sample forward pass.
struct Trace {
    acts: Vec<Vec<f32>>,
    pool_argmax: Vec<Vec<u32>>,
}

impl Model {
    /// He-normal initialized weights, zero biases.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut model = Model::zeros(input_shape, layers)?;
        let mut rng = rng::stream(seed, 0x1417);
        for (layer, slot) in model.layers.iter().zip(&model.param_slot) {
            if let Some(i) = slot {
                let std = (2.0 / layer.fan_in().max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                for w in model.params[*i].weight.data_mut() {
                    *w = normal.sample(&mut rng) as f32;
                }
            }
        }
        Ok(model)
    }

    pub fn zeros(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let params = layers
            .iter()
            .filter_map(|l| l.param_shapes())
            .map(|(w, b)| Param {
                weight: Tensor::zeros(w),
                bias: Tensor::zeros(b),
            })
            .collect();
        Model::from_params(input_shape, layers, params)
    }

    pub fn from_params(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Param>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        if layers.is_empty() {
            return Err(Error::shape("model needs at least one layer"));
        }
        let mut shapes = vec![input_shape.clone()];
        let mut param_slot = Vec::with_capacity(layers.len());
        let mut next = 0;
        for layer in &layers {
            let out = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(out);
            if let Some((w, b)) = layer.param_shapes() {
                let p = params.get(next).ok_or_else(|| {
                    Error::shape(format!("missing parameters for layer {layer:?}"))
                })?;
                if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                    return Err(Error::shape(format!(
                        "parameter shapes {:?}/{:?} do not match {layer:?}",
                        p.weight.shape(),
                        p.bias.shape()
                    )));
                }
                param_slot.push(Some(next));
                next += 1;
            } else {
                param_slot.push(None);
            }
        }
        if next != params.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors supplied for {next} parameterized layers",
                params.len()
            )));
        }
        if shapes.last().map(Vec::len) != Some(1) {
            return Err(Error::shape("model output must be a flat vector"));
        }
        Ok(Model {
            input_shape,
            layers,
            params,
            shapes,
            param_slot,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Output width (number of classes for a classifier).
    pub fn num_classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.sample_shape() != self.input_shape.as_slice()
        {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(batch.batch_len())
    }

    /// Logits of shape `[batch, C]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_with(batch, Exec::default())
    }

    pub fn forward_with(&self, batch: &Tensor, exec: Exec) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let c = self.num_classes();
        let chunks = exec.map_chunks(n, SAMPLE_CHUNK, |range| -> Result<Vec<f32>> {
            let mut out = Vec::with_capacity(range.len() * c);
            for i in range {
                let trace = self.trace(batch.sample(i), false)?;
                out.extend_from_slice(trace.acts.last().expect("output"));
            }
            Ok(out)
        });
        let mut data = Vec::with_capacity(n * c);
        for chunk in chunks {
            data.extend(chunk?);
        }
        Tensor::new(vec![n, c], data)
    }

    /// Argmax class per sample; ties break toward the lowest index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok((0..logits.batch_len())
            .map(|i| super::loss::argmax(logits.sample(i)))
            .collect())
    }

    /// Mean loss over the batch and its gradients.
    pub fn grad(&self, batch: &Tensor, loss: &LossSpec) -> Result<(f32, Gradients)> {
        self.grad_with(batch, loss, Exec::default())
    }

    pub fn grad_with(
        &self,
        batch: &Tensor,
        loss: &LossSpec,
        exec: Exec,
    ) -> Result<(f32, Gradients)> {
        self.grad_counting(batch, loss, exec, true).map(|(l, g, _)| (l, g))
    }

    /// Like [`Model::grad_with`], also counting class targets predicted
    /// correctly by the pre-update model.
    pub(crate) fn grad_counting(
        &self,
        batch: &Tensor,
        loss: &LossSpec,
        exec: Exec,
        need_input: bool,
    ) -> Result<(f32, Gradients, usize)> {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let n = self.check_batch(batch)?;
        if loss.len() != n {
            return Err(Error::shape(format!(
                "loss has {} targets for a batch of {n}",
                loss.len()
            )));
        }
        let scale = if n == 0 { 0.0 } else { 1.0 / n as f32 };
        let correct = AtomicUsize::new(0);
        let (total, grads) = self.accumulate(batch, exec, need_input, |i, logits| {
            if let Target::Class(label) = loss.targets()[i] {
                if super::loss::argmax(logits) == label {
                    correct.fetch_add(1, Ordering::Relaxed);
                }
            }
            let (l, mut g) = loss.sample_loss(i, logits)?;
            for v in &mut g {
                *v *= scale;
            }
            Ok((l * f64::from(scale), g))
        })?;
        Ok((total as f32, grads, correct.into_inner()))
    }

    /// Backpropagates an arbitrary upstream gradient `dL/dlogits` of shape
    /// `[batch, C]` through the network.
    pub fn backprop(&self, batch: &Tensor, out_grad: &Tensor) -> Result<Gradients> {
        self.backprop_with(batch, out_grad, Exec::default())
    }

    pub fn backprop_with(&self, batch: &Tensor, out_grad: &Tensor, exec: Exec) -> Result<Gradients> {
        let n = self.check_batch(batch)?;
        if out_grad.shape() != [n, self.num_classes()] {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match output [{n}, {}]",
                out_grad.shape(),
                self.num_classes()
            )));
        }
        self.accumulate(batch, exec, true, |i, _| Ok((0.0, out_grad.sample(i).to_vec())))
            .map(|(_, g)| g)
    }

    /// Runs forward+backward for every sample, letting `head` turn the logits
    /// into `(loss contribution, dL/dlogits)`. Per-chunk sums are combined in
    /// chunk order for reproducibility.
    fn accumulate<F>(
        &self,
        batch: &Tensor,
        exec: Exec,
        need_input: bool,
        head: F,
    ) -> Result<(f64, Gradients)>
    where
        F: Fn(usize, &[f32]) -> Result<(f64, Vec<f32>)> + Sync + Send,
    {
        let n = batch.batch_len();
        let per = self.input_len();
        let chunks = exec.map_chunks(n, SAMPLE_CHUNK, |range| {
            let mut params: Vec<Param> = self.params.iter().map(Param::zeros_like).collect();
            let mut dinput = Vec::with_capacity(if need_input { range.len() * per } else { 0 });
            let mut loss = 0.0f64;
            for i in range {
                let trace = self.trace(batch.sample(i), true)?;
                let (l, dout) = head(i, trace.acts.last().expect("output"))?;
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        layer: self.layers.len(),
                    });
                }
                loss += l;
                let dx = self.backward_sample(&trace, dout, &mut params, need_input);
                if need_input {
                    dinput.extend_from_slice(&dx);
                }
            }
            Ok((loss, params, dinput))
        });

        let mut total = 0.0f64;
        let mut params: Vec<Param> = self.params.iter().map(Param::zeros_like).collect();
        let mut dinput = Vec::with_capacity(if need_input { n * per } else { 0 });
        for chunk in chunks {
            let (l, p, d) = chunk?;
            total += l;
            for (acc, part) in params.iter_mut().zip(&p) {
                acc.add_assign(part);
            }
            dinput.extend(d);
        }
        let input = if need_input {
            Tensor::new(batch.shape().to_vec(), dinput)?
        } else {
            Tensor::zeros(vec![0])
        };
        Ok((total, Gradients { params, input }))
    }

    fn trace(&self, x: &[f32], keep: bool) -> Result<Trace> {
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut cur = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let in_shape = &self.shapes[li];
            let mut argmax = Vec::new();
            let next = match *layer {
                LayerSpec::Dense { input, output } => {
                    let p = &self.params[self.param_slot[li].expect("dense has params")];
                    dense_forward(&cur, p, input, output)
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                } => {
                    let p = &self.params[self.param_slot[li].expect("conv has params")];
                    conv_forward(&cur, p, in_channels, out_channels, in_shape[1], in_shape[2])
                }
                LayerSpec::Relu => cur.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::Sigmoid => cur.iter().map(|&v| sigmoid(v)).collect(),
                LayerSpec::MaxPool2x2 => {
                    let (out, idx) = maxpool_forward(&cur, in_shape[0], in_shape[1], in_shape[2]);
                    argmax = idx;
                    out
                }
                LayerSpec::Flatten => cur.clone(),
            };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: li });
            }
            if keep {
                acts.push(std::mem::replace(&mut cur, next));
                pool_argmax.push(argmax);
            } else {
                cur = next;
            }
        }
        acts.push(cur);
        Ok(Trace { acts, pool_argmax })
    }

    fn backward_sample(
        &self,
        trace: &Trace,
        dout: Vec<f32>,
        grads: &mut [Param],
        need_input: bool,
    ) -> Vec<f32> {
        let mut g = dout;
        for li in (0..self.layers.len()).rev() {
            let input = &trace.acts[li];
            let output = &trace.acts[li + 1];
            let in_shape = &self.shapes[li];
            let want_dx = need_input || li > 0;
            g = match self.layers[li] {
                LayerSpec::Dense {
                    input: n_in,
                    output: n_out,
                } => {
                    let slot = self.param_slot[li].expect("dense has params");
                    dense_backward(input, &g, &self.params[slot], &mut grads[slot], n_in, n_out, want_dx)
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                } => {
                    let slot = self.param_slot[li].expect("conv has params");
                    conv_backward(
                        input,
                        &g,
                        &self.params[slot],
                        &mut grads[slot],
                        in_channels,
                        out_channels,
                        in_shape[1],
                        in_shape[2],
                        want_dx,
                    )
                }
                LayerSpec::Relu => g
                    .iter()
                    .zip(output)
                    .map(|(&d, &o)| if o > 0.0 { d } else { 0.0 })
                    .collect(),
                LayerSpec::Sigmoid => g
                    .iter()
                    .zip(output)
                    .map(|(&d, &o)| d * o * (1.0 - o))
                    .collect(),
                LayerSpec::MaxPool2x2 => {
                    let mut dx = vec![0.0; input.len()];
                    for (&d, &src) in g.iter().zip(&trace.pool_argmax[li]) {
                        dx[src as usize] += d;
                    }
                    dx
                }
                LayerSpec::Flatten => g,
            };
        }
        g
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dense_forward(x: &[f32], p: &Param, n_in: usize, n_out: usize) -> Vec<f32> {
    let w = p.weight.data();
    let b = p.bias.data();
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect()
}

fn dense_backward(
    x: &[f32],
    g: &[f32],
    p: &Param,
    grad: &mut Param,
    n_in: usize,
    n_out: usize,
    want_dx: bool,
) -> Vec<f32> {
    let w = p.weight.data();
    let gw = grad.weight.data_mut();
    let mut dx = vec![0.0; if want_dx { n_in } else { 0 }];
    for o in 0..n_out {
        let go = g[o];
        if go == 0.0 {
            continue;
        }
        for (acc, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *acc += go * xi;
        }
        if want_dx {
            for (d, &wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *d += go * wi;
            }
        }
    }
    for (gb, &go) in grad.bias.data_mut().iter_mut().zip(g) {
        *gb += go;
    }
    dx
}

fn pad(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * ph + y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

fn conv_forward(x: &[f32], p: &Param, cin: usize, cout: usize, h: usize, w: usize) -> Vec<f32> {
    let padded = pad(x, cin, h, w);
    let (ph, pw) = (h + 2, w + 2);
    let wt = p.weight.data();
    let bias = p.bias.data();
    let mut out = vec![0.0; cout * h * w];
    for oc in 0..cout {
        let plane = &mut out[oc * h * w..(oc + 1) * h * w];
        plane.fill(bias[oc]);
        for ic in 0..cin {
            let src = &padded[ic * ph * pw..(ic + 1) * ph * pw];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let k = wt[((oc * cin + ic) * KERNEL + ky) * KERNEL + kx];
                    for y in 0..h {
                        let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        for (o, &v) in plane[y * w..(y + 1) * w].iter_mut().zip(row) {
                            *o += k * v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f32],
    g: &[f32],
    p: &Param,
    grad: &mut Param,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    want_dx: bool,
) -> Vec<f32> {
    let padded = pad(x, cin, h, w);
    let (ph, pw) = (h + 2, w + 2);
    let wt = p.weight.data();
    let mut dpad = vec![0.0; if want_dx { cin * ph * pw } else { 0 }];
    {
        let gw = grad.weight.data_mut();
        for oc in 0..cout {
            let gplane = &g[oc * h * w..(oc + 1) * h * w];
            for ic in 0..cin {
                let src = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let widx = ((oc * cin + ic) * KERNEL + ky) * KERNEL + kx;
                        let mut acc = 0.0f32;
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            acc += row
                                .iter()
                                .zip(&gplane[y * w..(y + 1) * w])
                                .map(|(a, b)| a * b)
                                .sum::<f32>();
                        }
                        gw[widx] += acc;
                        if want_dx {
                            let k = wt[widx];
                            let dst = &mut dpad[ic * ph * pw..(ic + 1) * ph * pw];
                            for y in 0..h {
                                let base = (y + ky) * pw + kx;
                                for (d, &gv) in
                                    dst[base..base + w].iter_mut().zip(&gplane[y * w..(y + 1) * w])
                                {
                                    *d += k * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (oc, gb) in grad.bias.data_mut().iter_mut().enumerate() {
        *gb += g[oc * h * w..(oc + 1) * h * w].iter().sum::<f32>();
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; cin * h * w];
    for ch in 0..cin {
        for y in 0..h {
            let src = (ch * ph + y + 1) * pw + 1;
            dx[(ch * h + y) * w..(ch * h + y + 1) * w].copy_from_slice(&dpad[src..src + w]);
        }
    }
    dx
}

fn maxpool_forward(x: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (ch * h + 2 * y + dy) * w + 2 * xo + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i as u32);
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::desk_classifier;

    #[test]
    fn zero_weight_dense_model_outputs_zero() {
        let m = Model::zeros(
            vec![4],
            vec![
                LayerSpec::Dense { input: 4, output: 6 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 6, output: 3 },
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 5.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut m = Model::zeros(vec![5], vec![LayerSpec::Dense { input: 5, output: 5 }]).unwrap();
        for i in 0..5 {
            m.params_mut()[0].weight.data_mut()[i * 5 + i] = 1.0;
        }
        let x = Tensor::new(vec![1, 5], vec![0.1, -0.2, 3.0, 4.5, -7.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Model::new(vec![1, 8, 8], desk_classifier(&[1, 8, 8], 3).unwrap(), 1).unwrap();
        let x = Tensor::zeros(vec![2, 1, 8, 9]);
        assert!(matches!(m.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn nonfinite_input_reports_layer() {
        let m = Model::new(vec![3], vec![LayerSpec::Dense { input: 3, output: 2 }], 0).unwrap();
        let x = Tensor::new(vec![1, 3], vec![f32::INFINITY, 0.0, 0.0]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::NonFinite { layer: 0 })));
    }

    #[test]
    fn clone_does_not_alias() {
        let a = Model::new(vec![3], vec![LayerSpec::Dense { input: 3, output: 2 }], 7).unwrap();
        let mut b = a.clone();
        b.params_mut()[0].weight.data_mut()[0] += 1.0;
        assert_ne!(a, b);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let m = Model::new(vec![1, 8, 8], desk_classifier(&[1, 8, 8], 4).unwrap(), 3).unwrap();
        let mut r = rng::stream(9, 0);
        let x = Tensor::new(vec![19, 1, 8, 8], rng::standard_normal(&mut r, 19 * 64)).unwrap();
        let labels: Vec<usize> = (0..19).map(|i| i % 4).collect();
        let loss = LossSpec::cross_entropy(&labels);
        let (l1, g1) = m.grad_with(&x, &loss, Exec::Sequential).unwrap();
        let (l2, g2) = m.grad_with(&x, &loss, Exec::Parallel).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
