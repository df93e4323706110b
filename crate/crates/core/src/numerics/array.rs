use std::fmt;

use super::NumericsError;

/// Dense row-major array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    /// Builds an array, rejecting zero-length dimensions, a value count that
    /// disagrees with the shape, and any non-finite value.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                context: format!("array construction at flat index {index}"),
            });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by kernels that already
    /// validated their output.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    /// In-place access for optimizers, which keep values finite themselves.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Result<Self, NumericsError> {
        Self::new(vec![values.len()], values.to_vec())
    }

    /// Builds a 2-D array from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::InvalidShape {
                shape: vec![rows.len(), cols],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("arrays have at least one axis")
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Same data viewed under a different shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Applies `f` elementwise, validating finiteness of the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, NumericsError> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Row `i` of a 2-D array.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.ndim(), 2, "row() requires a 2-D array");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Allowed/blocked pattern for [`masked_softmax`](super::Var::masked_softmax).
///
/// A blocked entry behaves as an additive `-inf` score. The mask is tiled
/// over the input when the input holds a whole number of copies of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, allowed: Vec<bool>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidShape { shape });
        }
        if shape.iter().product::<usize>() != allowed.len() {
            return Err(NumericsError::LengthMismatch {
                shape,
                len: allowed.len(),
            });
        }
        Ok(Self { shape, allowed })
    }

    /// Builds a mask from additive entries that must be exactly `0` or `-inf`.
    pub fn from_additive(shape: Vec<usize>, entries: &[f64]) -> Result<Self, NumericsError> {
        let mut allowed = Vec::with_capacity(entries.len());
        for (i, &e) in entries.iter().enumerate() {
            if e == 0.0 {
                allowed.push(true);
            } else if e == f64::NEG_INFINITY {
                allowed.push(false);
            } else {
                return Err(NumericsError::InvalidMask { index: i, value: e });
            }
        }
        Self::new(shape, allowed)
    }

    /// Mask that allows everything.
    pub fn none(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            allowed: vec![true; shape.iter().product()],
        }
    }

    /// Lower-triangular `n × n` mask: row `t` may attend to columns `s <= t`.
    pub fn autoregressive(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for t in 0..n {
            for s in 0..=t {
                allowed[t * n + s] = true;
            }
        }
        Self {
            shape: vec![n, n],
            allowed,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}
