//! `WMDL` checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size   field
//! 0       4      magic b"WMDL"
//! 4       4      format version (u32) = 1
//! 8       4      flags (u32); bit 0 set = generator checkpoint
//! 12      4      input rank r (u32)
//! 16      4*r    input dims (u32 each)
//! ..      4      layer count L (u32)
//! ..      12*L   layer table, per layer: tag, a, b (u32 each)
//!                  1 dense (a=in, b=out)     2 conv2d (a=in_ch, b=out_ch)
//!                  3 relu   4 maxpool2x2   5 flatten   6 sigmoid   (a=b=0)
//! ..      12     generator only: output image shape c, h, w (u32 each)
//! ..      8      parameter float count P (u64)
//! ..      4*P    f32 parameters: for each parameterized layer in order,
//!                weight (row-major) then bias
//! ```
//!
//! Trailing bytes after the parameters are rejected.

use std::io::Write;
use std::path::Path;

use super::layer::LayerSpec;
use super::model::{Model, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WMDL";
pub const FORMAT_VERSION: u32 = 1;
pub const FLAG_GENERATOR: u32 = 1;

/// A decoded checkpoint; `image_shape` is present for generators.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub image_shape: Option<[usize; 3]>,
}

fn layer_tag(layer: &LayerSpec) -> [u32; 3] {
    match *layer {
        LayerSpec::Dense { input, output } => [1, input as u32, output as u32],
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
        } => [2, in_channels as u32, out_channels as u32],
        LayerSpec::Relu => [3, 0, 0],
        LayerSpec::MaxPool2x2 => [4, 0, 0],
        LayerSpec::Flatten => [5, 0, 0],
        LayerSpec::Sigmoid => [6, 0, 0],
    }
}

fn layer_from_tag(tag: [u32; 3]) -> Result<LayerSpec> {
    let [t, a, b] = tag;
    Ok(match t {
        1 => LayerSpec::Dense {
            input: a as usize,
            output: b as usize,
        },
        2 => LayerSpec::Conv2d {
            in_channels: a as usize,
            out_channels: b as usize,
        },
        3 => LayerSpec::Relu,
        4 => LayerSpec::MaxPool2x2,
        5 => LayerSpec::Flatten,
        6 => LayerSpec::Sigmoid,
        other => return Err(Error::format(format!("unknown layer tag {other}"))),
    })
}

pub fn encode(model: &Model, image_shape: Option<[usize; 3]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let flags = if image_shape.is_some() { FLAG_GENERATOR } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(model.input_shape().len() as u32).to_le_bytes());
    for &d in model.input_shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        for word in layer_tag(layer) {
            out.extend_from_slice(&word.to_le_bytes());
        }
    }
    if let Some(shape) = image_shape {
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("checkpoint truncated reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("not a WMDL checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported WMDL version {version}")));
    }
    let flags = c.u32("flags")?;
    if flags & !FLAG_GENERATOR != 0 {
        return Err(Error::format(format!("unknown WMDL flags {flags:#x}")));
    }
    let rank = c.u32("input rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(format!("implausible input rank {rank}")));
    }
    let input_shape = (0..rank)
        .map(|_| c.u32("input dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_layers = c.u32("layer count")? as usize;
    if n_layers > 1024 {
        return Err(Error::format(format!("implausible layer count {n_layers}")));
    }
    let layers = (0..n_layers)
        .map(|_| {
            let tag = [c.u32("layer table")?, c.u32("layer table")?, c.u32("layer table")?];
            layer_from_tag(tag)
        })
        .collect::<Result<Vec<_>>>()?;
    let image_shape = if flags & FLAG_GENERATOR != 0 {
        Some([
            c.u32("image shape")? as usize,
            c.u32("image shape")? as usize,
            c.u32("image shape")? as usize,
        ])
    } else {
        None
    };
    let count = u64::from_le_bytes(c.take(8, "parameter count")?.try_into().expect("8 bytes"));
    let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
    if count != expected as u64 {
        return Err(Error::format(format!(
            "parameter count {count} does not match layer table ({expected})"
        )));
    }
    let raw = c.take(expected * 4, "parameters")?;
    if c.pos != bytes.len() {
        return Err(Error::format("trailing bytes after parameters"));
    }
    let mut floats = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
    let mut params = Vec::new();
    for layer in &layers {
        if let Some((ws, bs)) = layer.param_shapes() {
            let wn: usize = ws.iter().product();
            let bn: usize = bs.iter().product();
            let weight = Tensor::new(ws, floats.by_ref().take(wn).collect())?;
            let bias = Tensor::new(bs, floats.by_ref().take(bn).collect())?;
            params.push(Param { weight, bias });
        }
    }
    let model = Model::from_params(input_shape, layers, params)
        .map_err(|e| Error::format(format!("inconsistent checkpoint: {e}")))?;
    if let Some(shape) = image_shape {
        if shape.iter().product::<usize>() != model.num_classes() {
            return Err(Error::format("generator image shape does not match output width"));
        }
    }
    Ok(Checkpoint { model, image_shape })
}

pub fn save(path: &Path, model: &Model, image_shape: Option<[usize; 3]>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model, image_shape))?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, self, None)
    }

    /// Loads a classifier checkpoint (generator checkpoints are rejected).
    pub fn load(path: &Path) -> Result<Model> {
        let ck = load(path)?;
        if ck.image_shape.is_some() {
            return Err(Error::format(format!(
                "{} is a generator checkpoint, expected a classifier",
                path.display()
            )));
        }
        Ok(ck.model)
    }
}
