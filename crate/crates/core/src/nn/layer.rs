use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of a feed-forward network.
///
/// Convolutions are fixed at 3x3 kernels, stride 1, padding 1, so they keep
/// spatial size; pooling halves it (floor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_channels: usize, out_channels: usize },
    Relu,
    MaxPool2x2,
    Flatten,
    Sigmoid,
}

pub const KERNEL: usize = 3;

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                input: n_in,
                output,
            } => {
                if input != [n_in] {
                    return Err(Error::shape(format!(
                        "dense({n_in}->{output}) got input shape {input:?}"
                    )));
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => match input {
                [c, h, w] if *c == in_channels => Ok(vec![out_channels, *h, *w]),
                _ => Err(Error::shape(format!(
                    "conv2d({in_channels}->{out_channels}) got input shape {input:?}"
                ))),
            },
            LayerSpec::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(Error::shape(format!(
                    "maxpool2x2 got input shape {input:?}"
                ))),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    /// `(weight shape, bias shape)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => Some((vec![output, input], vec![output])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
            } => Some((
                vec![out_channels, in_channels, KERNEL, KERNEL],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d { in_channels, .. } => in_channels * KERNEL * KERNEL,
            _ => 0,
        }
    }
}

/// The default desk classifier: two conv/pool stages and a two-layer head.
pub fn desk_classifier(input_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
    let (c, h, w) = match input_shape {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::shape(format!(
                "classifier input must be [channels, height, width], got {input_shape:?}"
            )))
        }
    };
    if h < 4 || w < 4 {
        return Err(Error::shape("classifier input must be at least 4x4"));
    }
    let flat = 16 * (h / 2 / 2) * (w / 2 / 2);
    Ok(vec![
        LayerSpec::Conv2d {
            in_channels: c,
            out_channels: 8,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d {
            in_channels: 8,
            out_channels: 16,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            input: flat,
            output: 64,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            input: 64,
            output: num_classes,
        },
    ])
}
