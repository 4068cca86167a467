use crate::error::{Error, Result};

/// Dense row-major `f32` array.
///
/// Batches carry the sample count as the leading dimension. A zero leading
/// dimension (an empty batch) is allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Stacks equally sized samples into a batch of shape `[n, sample_shape..]`.
    pub fn stack<S: AsRef<[f32]>>(sample_shape: &[usize], samples: &[S]) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(per * samples.len());
        for s in samples {
            let s = s.as_ref();
            if s.len() != per {
                return Err(Error::shape(format!(
                    "sample of {} values does not fit shape {sample_shape:?}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; 0 for a scalar-shaped tensor.
    pub fn batch_len(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1.min(self.shape.len())..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the given samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Tensor { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
