//! Identity encoding: a key expands into a reverse one-way chain of 256-bit
//! codes; every code maps to a trigger image and a pseudorandom label.
//!
//! All hashing is SHA-256 with a one-byte role prefix:
//!
//! | role                  | input                 |
//! |-----------------------|-----------------------|
//! | chain tail `u_{N-1}`  | `0x01 ‖ key`          |
//! | chain tail `u_N`      | `0x02 ‖ key`          |
//! | chain link            | `0x03 ‖ a ‖ b`        |
//! | label                 | `0x04 ‖ code`         |
//! | noise-trigger seed    | `0x05 ‖ code`         |
//! | latent expansion      | `0x06 ‖ code ‖ block` |
//!
//! Labels and seeds read the first eight digest bytes as a big-endian `u64`.

use std::fmt;

use base64::Engine as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::dfd::Generator;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

pub const CODE_LEN: usize = 32;

const TAG_TAIL_A: u8 = 0x01;
const TAG_TAIL_B: u8 = 0x02;
const TAG_LINK: u8 = 0x03;
const TAG_LABEL: u8 = 0x04;
const TAG_SEED: u8 = 0x05;
const TAG_LATENT: u8 = 0x06;

fn hash(tag: u8, parts: &[&[u8]]) -> [u8; CODE_LEN] {
    let mut h = Sha256::new();
    h.update([tag]);
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn leading_u64(digest: &[u8; CODE_LEN]) -> u64 {
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A 256-bit identity code; serialized as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Code([u8; CODE_LEN]);

impl Code {
    pub const fn from_bytes(bytes: [u8; CODE_LEN]) -> Self {
        Code(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; CODE_LEN] = bytes.try_into().map_err(|_| {
            Error::Codec(format!("code must be {CODE_LEN} bytes, got {}", bytes.len()))
        })?;
        Ok(Code(arr))
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 2 * CODE_LEN || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(Error::Codec(format!("code must be 64 lowercase hex chars: {s:?}")));
        }
        let bytes = hex::decode(s).map_err(|e| Error::Codec(format!("bad code hex: {e}")))?;
        Code::from_slice(&bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; CODE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Code({})", self.to_hex())
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Code {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Code {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Code::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// The two chain-tail codes `(u_{N-1}, u_N)` of a key.
pub fn derive_tail(key: &[u8]) -> (Code, Code) {
    (
        Code(hash(TAG_TAIL_A, &[key])),
        Code(hash(TAG_TAIL_B, &[key])),
    )
}

/// One-way chain link `g(a, b)`.
pub fn reduce(a: &Code, b: &Code) -> Code {
    Code(hash(TAG_LINK, &[&a.0, &b.0]))
}

/// [`reduce`] over raw byte strings, rejecting anything that is not a code.
pub fn reduce_bytes(a: &[u8], b: &[u8]) -> Result<Code> {
    Ok(reduce(&Code::from_slice(a)?, &Code::from_slice(b)?))
}

/// Pseudorandom label in `[0, C)`.
pub fn assign_label(code: &Code, num_classes: usize) -> Result<usize> {
    if num_classes == 0 {
        return Err(Error::param("label map needs C >= 1"));
    }
    Ok((leading_u64(&hash(TAG_LABEL, &[&code.0])) % num_classes as u64) as usize)
}

pub fn trigger_seed(code: &Code) -> u64 {
    leading_u64(&hash(TAG_SEED, &[&code.0]))
}

/// `u_1 .. u_N` with `u_n = reduce(u_{n+1}, u_{n+2})`.
///
/// Sequences for the same key but different `N` share only the tail
/// derivation: `u_{N-1}, u_N` are always `derive_tail(key)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    codes: Vec<Code>,
}

impl CodeSequence {
    pub fn build(key: &[u8], n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::param(format!("code sequence needs N >= 2, got {n}")));
        }
        let (a, b) = derive_tail(key);
        let mut codes = vec![Code([0; CODE_LEN]); n];
        codes[n - 2] = a;
        codes[n - 1] = b;
        for i in (0..n - 2).rev() {
            codes[i] = reduce(&codes[i + 1], &codes[i + 2]);
        }
        Ok(CodeSequence { codes })
    }

    /// Wraps existing codes, checking every chain link.
    pub fn from_codes(codes: Vec<Code>) -> Result<Self> {
        let seq = CodeSequence { codes };
        if seq.codes.len() < 2 {
            return Err(Error::param("code sequence needs N >= 2"));
        }
        if !seq.links_hold() {
            return Err(Error::Codec("code chain link broken".into()));
        }
        Ok(seq)
    }

    pub fn links_hold(&self) -> bool {
        self.codes
            .windows(3)
            .all(|w| w[0] == reduce(&w[1], &w[2]))
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// `[channels, height, width]`.
pub type ImageShape = [usize; 3];

/// Maps a code to a trigger image with pixels in `[0, 1]`. Implementations
/// must be pure functions of the code.
pub trait TriggerEncoder: Send + Sync {
    fn image_shape(&self) -> ImageShape;
    fn encode(&self, code: &Code) -> Vec<f32>;

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }
}

/// Standard deviation of the seeded-noise encoder's pixels.
pub const NOISE_SIGMA: f64 = 0.15;

/// Built-in trigger encoders.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSpec {
    /// Independent `N(0.5, 0.15^2)` pixels, clamped, seeded from the code.
    SeededNoise { shape: ImageShape },
    /// `G(z)` where `z` is the inverse normal CDF of code-byte midpoints.
    GeneratorLatent { generator: Box<Generator> },
    /// `0.5 + sum_b bit_b(code) * w_b * basis_b` over the `bits` lowest code
    /// bits, with fixed basis patterns in `[-1, 1]` and weights
    /// `w_b = 0.5 * 2^b / (2^bits - 1)`.
    ContinuousLinear {
        shape: ImageShape,
        bits: u32,
        basis_seed: u64,
    },
}

/// Serializable description of an encoder. Generator weights are stored
/// separately as a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum EncoderDescriptor {
    SeededNoise {
        shape: ImageShape,
    },
    GeneratorLatent {
        shape: ImageShape,
        latent_dim: usize,
    },
    ContinuousLinear {
        shape: ImageShape,
        bits: u32,
        basis_seed: u64,
    },
}

impl EncoderSpec {
    pub fn seeded_noise(shape: ImageShape) -> Self {
        EncoderSpec::SeededNoise { shape }
    }

    pub fn continuous_linear(shape: ImageShape, bits: u32, basis_seed: u64) -> Result<Self> {
        if bits == 0 || bits > 32 {
            return Err(Error::param(format!("continuous-linear bits must be 1..=32, got {bits}")));
        }
        Ok(EncoderSpec::ContinuousLinear {
            shape,
            bits,
            basis_seed,
        })
    }

    pub fn descriptor(&self) -> EncoderDescriptor {
        match self {
            EncoderSpec::SeededNoise { shape } => EncoderDescriptor::SeededNoise { shape: *shape },
            EncoderSpec::GeneratorLatent { generator } => EncoderDescriptor::GeneratorLatent {
                shape: generator.image_shape(),
                latent_dim: generator.latent_dim(),
            },
            EncoderSpec::ContinuousLinear {
                shape,
                bits,
                basis_seed,
            } => EncoderDescriptor::ContinuousLinear {
                shape: *shape,
                bits: *bits,
                basis_seed: *basis_seed,
            },
        }
    }

    /// Rebuilds an encoder from its descriptor; generator-latent encoders
    /// need the generator.
    pub fn from_descriptor(desc: &EncoderDescriptor, generator: Option<Generator>) -> Result<Self> {
        match desc {
            EncoderDescriptor::SeededNoise { shape } => Ok(EncoderSpec::SeededNoise { shape: *shape }),
            EncoderDescriptor::ContinuousLinear {
                shape,
                bits,
                basis_seed,
            } => EncoderSpec::continuous_linear(*shape, *bits, *basis_seed),
            EncoderDescriptor::GeneratorLatent { shape, latent_dim } => {
                let g = generator.ok_or_else(|| {
                    Error::param("generator-latent encoder requires its generator checkpoint")
                })?;
                if g.image_shape() != *shape || g.latent_dim() != *latent_dim {
                    return Err(Error::param("generator does not match encoder descriptor"));
                }
                Ok(EncoderSpec::GeneratorLatent {
                    generator: Box::new(g),
                })
            }
        }
    }

    /// Weight `w_b` of basis pattern `b` (continuous-linear only).
    pub fn basis_weight(&self, bit: u32) -> Option<f32> {
        match self {
            EncoderSpec::ContinuousLinear { bits, .. } if bit < *bits => {
                let denom = (2f64.powi(*bits as i32) - 1.0).max(1.0);
                Some((0.5 * 2f64.powi(bit as i32) / denom) as f32)
            }
            _ => None,
        }
    }
}

/// Latent vector for the generator-latent encoder.
pub fn code_latent(code: &Code, latent_dim: usize) -> Vec<f32> {
    let std_normal = StatNormal::new(0.0, 1.0).expect("standard normal");
    let mut bytes = code.0.to_vec();
    let mut block = 0u32;
    while bytes.len() < latent_dim {
        bytes.extend_from_slice(&hash(TAG_LATENT, &[&code.0, &block.to_be_bytes()]));
        block += 1;
    }
    bytes[..latent_dim]
        .iter()
        .map(|&b| std_normal.inverse_cdf((f64::from(b) + 0.5) / 256.0) as f32)
        .collect()
}

impl TriggerEncoder for EncoderSpec {
    fn image_shape(&self) -> ImageShape {
        match self {
            EncoderSpec::SeededNoise { shape } | EncoderSpec::ContinuousLinear { shape, .. } => {
                *shape
            }
            EncoderSpec::GeneratorLatent { generator } => generator.image_shape(),
        }
    }

    fn encode(&self, code: &Code) -> Vec<f32> {
        match self {
            EncoderSpec::SeededNoise { shape } => {
                let n: usize = shape.iter().product();
                let mut r = rng::stream(trigger_seed(code), 0);
                let normal = Normal::new(0.5, NOISE_SIGMA).expect("valid sigma");
                (0..n)
                    .map(|_| (normal.sample(&mut r) as f32).clamp(0.0, 1.0))
                    .collect()
            }
            EncoderSpec::GeneratorLatent { generator } => {
                let z = code_latent(code, generator.latent_dim());
                let z = Tensor::new(vec![1, generator.latent_dim()], z).expect("latent shape");
                generator
                    .generate(&z)
                    .expect("generator accepts its own latent shape")
                    .into_data()
            }
            EncoderSpec::ContinuousLinear {
                shape,
                bits,
                basis_seed,
            } => {
                let n: usize = shape.iter().product();
                let low = u64::from_be_bytes(code.0[CODE_LEN - 8..].try_into().expect("8 bytes"));
                let mut img = vec![0.5f32; n];
                for b in 0..*bits {
                    if (low >> b) & 1 == 0 {
                        continue;
                    }
                    let w = self.basis_weight(b).expect("bit in range");
                    for (px, basis) in img.iter_mut().zip(basis_pattern(*basis_seed, b, n)) {
                        *px += w * basis;
                    }
                }
                img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
            }
        }
    }
}

fn basis_pattern(seed: u64, bit: u32, n: usize) -> impl Iterator<Item = f32> {
    use rand::Rng as _;
    let mut r = rng::stream(seed, 0xBA5E_0000 + u64::from(bit));
    (0..n).map(move |_| r.random_range(-1.0f32..=1.0))
}

/// One labelled trigger (or post-trigger) image.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRow {
    pub code: Code,
    pub image: Vec<f32>,
    pub label: usize,
}

/// The labelled trigger set `{(T(u_n), c(u_n))}` in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub image_shape: ImageShape,
    pub rows: Vec<TriggerRow>,
}

pub fn build_trigger_set(
    seq: &CodeSequence,
    encoder: &dyn TriggerEncoder,
    num_classes: usize,
) -> Result<TriggerSet> {
    let rows = seq
        .codes()
        .iter()
        .map(|code| {
            Ok(TriggerRow {
                code: *code,
                image: encoder.encode(code),
                label: assign_label(code, num_classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TriggerSet {
        image_shape: encoder.image_shape(),
        rows,
    })
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Every row satisfies `image == T(code)` exactly and `label == c(code)`.
    pub fn is_consistent(&self, encoder: &dyn TriggerEncoder, num_classes: usize) -> bool {
        self.rows.iter().all(|r| {
            r.image == encoder.encode(&r.code)
                && assign_label(&r.code, num_classes).ok() == Some(r.label)
        })
    }

    pub fn images(&self) -> Tensor {
        let rows: Vec<&[f32]> = self.rows.iter().map(|r| r.image.as_slice()).collect();
        Tensor::stack(&self.image_shape, &rows).expect("trigger images match their shape")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn with_images(&self, images: Vec<Vec<f32>>) -> Result<TriggerSet> {
        if images.len() != self.rows.len() {
            return Err(Error::shape("replacement image count differs from trigger count"));
        }
        let rows = self
            .rows
            .iter()
            .zip(images)
            .map(|(r, image)| TriggerRow {
                code: r.code,
                image,
                label: r.label,
            })
            .collect();
        Ok(TriggerSet {
            image_shape: self.image_shape,
            rows,
        })
    }
}

pub fn image_to_base64(image: &[f32]) -> String {
    let bytes: Vec<u8> = image.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn image_from_base64(s: &str) -> Result<Vec<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::format(format!("bad image base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format("image byte length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct TriggerRowDoc {
    code_hex: Code,
    label: usize,
    image: String,
}

#[derive(Serialize, Deserialize)]
struct TriggerSetDoc {
    image_shape: ImageShape,
    rows: Vec<TriggerRowDoc>,
}

impl TriggerSet {
    /// JSON document `{image_shape, rows: [{code_hex, label, image}]}` with
    /// images as base64 of little-endian `f32`s.
    pub fn to_document(&self) -> String {
        let doc = TriggerSetDoc {
            image_shape: self.image_shape,
            rows: self
                .rows
                .iter()
                .map(|r| TriggerRowDoc {
                    code_hex: r.code,
                    label: r.label,
                    image: image_to_base64(&r.image),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("trigger document serializes")
    }

    pub fn from_document(text: &str) -> Result<TriggerSet> {
        let doc: TriggerSetDoc = serde_json::from_str(text)?;
        let n: usize = doc.image_shape.iter().product();
        let rows = doc
            .rows
            .into_iter()
            .map(|r| {
                let image = image_from_base64(&r.image)?;
                if image.len() != n {
                    return Err(Error::format(format!(
                        "trigger image has {} pixels, expected {n}",
                        image.len()
                    )));
                }
                Ok(TriggerRow {
                    code: r.code_hex,
                    image,
                    label: r.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TriggerSet {
            image_shape: doc.image_shape,
            rows,
        })
    }
}
