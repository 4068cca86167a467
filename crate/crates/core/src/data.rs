//! Labelled image datasets: the builtin synthetic glyph task and the
//! standard IDX binary format (MNIST layout).

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Image batch `[n, channels, height, width]` with pixels in `[0, 1]` and
/// one label in `[0, C)` per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape(format!(
                "dataset images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.batch_len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.batch_len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::param("dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::param(format!("label {bad} >= C={num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the first `n` samples.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Desk-scale stand-in for a digit dataset: each class is a fixed glyph of
/// random strokes; samples jitter it by up to `max_shift` pixels, rescale
/// its intensity and add Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub size: usize,
    pub noise_sigma: f32,
    pub max_shift: i32,
    pub strokes_per_glyph: usize,
    /// Seed of the glyph shapes; fixes the task itself.
    pub glyph_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 10,
            size: 16,
            noise_sigma: 0.2,
            max_shift: 2,
            strokes_per_glyph: 3,
            glyph_seed: 0x5EED_6171,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn image_shape(&self) -> Vec<usize> {
        vec![1, self.size, self.size]
    }

    fn glyphs(&self) -> Vec<Vec<f32>> {
        let s = self.size as f32;
        let lo = 0.2 * s;
        let hi = 0.8 * s;
        (0..self.num_classes)
            .map(|c| {
                let mut r = rng::stream(self.glyph_seed, c as u64);
                let strokes: Vec<[f32; 4]> = (0..self.strokes_per_glyph)
                    .map(|_| {
                        [
                            r.random_range(lo..hi),
                            r.random_range(lo..hi),
                            r.random_range(lo..hi),
                            r.random_range(lo..hi),
                        ]
                    })
                    .collect();
                let mut img = vec![0.0f32; self.size * self.size];
                for y in 0..self.size {
                    for x in 0..self.size {
                        let p = (x as f32 + 0.5, y as f32 + 0.5);
                        let d = strokes
                            .iter()
                            .map(|st| segment_distance(p, (st[0], st[1]), (st[2], st[3])))
                            .fold(f32::INFINITY, f32::min);
                        img[y * self.size + x] = (1.5 - d).clamp(0.0, 1.0);
                    }
                }
                img
            })
            .collect()
    }

    /// `count` balanced samples (labels cycle through the classes in a
    /// seed-dependent order).
    pub fn generate(&self, count: usize, seed: u64) -> Result<Dataset> {
        if self.num_classes == 0 || self.size < 4 {
            return Err(Error::param("synthetic task needs C >= 1 and size >= 4"));
        }
        let glyphs = self.glyphs();
        let mut r = rng::stream(seed, 0xDA7A);
        let order = rng::permutation(&mut r, count);
        let labels: Vec<usize> = order.iter().map(|&i| i % self.num_classes).collect();
        let noise = Normal::new(0.0f32, self.noise_sigma.max(0.0)).expect("valid sigma");
        let n = self.size;
        let mut data = Vec::with_capacity(count * n * n);
        for &label in &labels {
            let glyph = &glyphs[label];
            let dx = r.random_range(-self.max_shift..=self.max_shift);
            let dy = r.random_range(-self.max_shift..=self.max_shift);
            let gain: f32 = r.random_range(0.7..1.0);
            for y in 0..n as i32 {
                for x in 0..n as i32 {
                    let (sx, sy) = (x - dx, y - dy);
                    let base = if (0..n as i32).contains(&sx) && (0..n as i32).contains(&sy) {
                        glyph[sy as usize * n + sx as usize]
                    } else {
                        0.0
                    };
                    let v = gain * base + noise.sample(&mut r);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Dataset::new(
            Tensor::new(vec![count, 1, n, n], data)?,
            labels,
            self.num_classes,
        )
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format(format!("{what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image file (`0x00000803`) into `[n, 1, rows, cols]`
/// scaled to `[0, 1]`.
fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let mut f = std::io::BufReader::new(open(path)?);
    let magic = read_u32_be(&mut f, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad image magic {magic:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut f, "image count")? as usize;
    let rows = read_u32_be(&mut f, "row count")? as usize;
    let cols = read_u32_be(&mut f, "column count")? as usize;
    let mut bytes = vec![0u8; n * rows * cols];
    f.read_exact(&mut bytes)
        .map_err(|e| Error::format(format!("{}: truncated pixels: {e}", path.display())))?;
    Tensor::new(
        vec![n, 1, rows, cols],
        bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )
}

/// Reads an IDX label file (`0x00000801`).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = std::io::BufReader::new(open(path)?);
    let magic = read_u32_be(&mut f, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad label magic {magic:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut f, "label count")? as usize;
    let mut bytes = vec![0u8; n];
    f.read_exact(&mut bytes)
        .map_err(|e| Error::format(format!("{}: truncated labels: {e}", path.display())))?;
    Ok(bytes.into_iter().map(usize::from).collect())
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    Dataset::new(read_idx_images(images)?, read_idx_labels(labels)?, num_classes)
}

/// Writes a dataset back out as an IDX image/label pair (pixels quantized
/// to bytes).
pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let shape = data.image_shape();
    if shape[0] != 1 {
        return Err(Error::param("IDX export supports single-channel images only"));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(images)?);
    for word in [
        IDX_IMAGES_MAGIC,
        data.len() as u32,
        shape[1] as u32,
        shape[2] as u32,
    ] {
        f.write_all(&word.to_be_bytes())?;
    }
    let px: Vec<u8> = data
        .images()
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&px)?;
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(labels)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(data.len() as u32).to_be_bytes())?;
    let lab: Vec<u8> = data.labels().iter().map(|&l| l as u8).collect();
    f.write_all(&lab)?;
    f.flush()?;
    Ok(())
}
