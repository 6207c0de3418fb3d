use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Dense n-dimensional array in row-major order.
///
/// Invariants: every extent is positive and `product(shape) == data.len()`.
/// A rank-0 tensor (empty shape) holds exactly one element.
///
/// Storage is refcounted: clones and reshapes share the buffer, and
/// `data_mut` copies on write only when the buffer is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape {
                op: "tensor",
                msg: "extents must be positive".into(),
                shape,
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadShape {
                op: "tensor",
                msg: format!("shape implies {} elements, got {}", numel, data.len()),
                shape,
            });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::ZERO; numel]),
        }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view of the elements; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        let v: &mut Vec<S> = Arc::make_mut(&mut self.data);
        v
    }

    pub fn into_data(self) -> Vec<S> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    /// Tensor with the same shared buffer under a new shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    pub fn at(&self, idx: &[usize]) -> S {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn is_all_finite(&self) -> bool {
        S::slice_all_finite(&self.data)
    }

    /// Convert element type (used to lift f32 cases into f64 oracles).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
        }
    }
}

/// Integer token tensor of rank 2 (`[rows, cols]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    rows: usize,
    cols: usize,
    data: Vec<u32>,
}

impl TokenIds {
    pub fn new(rows: usize, cols: usize, data: Vec<u32>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(TensorError::BadShape {
                op: "token_ids",
                msg: format!("{}x{} incompatible with {} ids", rows, cols, data.len()),
                shape: vec![rows, cols],
            });
        }
        Ok(TokenIds { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[u32]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::BadShape {
                    op: "token_ids",
                    msg: "ragged rows".into(),
                    shape: vec![r, c],
                });
            }
            data.extend_from_slice(row);
        }
        TokenIds::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}
