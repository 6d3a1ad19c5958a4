use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a specific [`Tape`](super::Tape).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Dense row-major array of rank 0, 1 or 2.
///
/// Values are immutable and shared, so clones are cheap. A tensor produced by
/// a tape operation carries the node it was recorded as.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Arc<[T]>,
    node: Option<NodeRef>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds an unrecorded tensor. Fails on a length mismatch or a non-finite entry.
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::shape(format!("rank {} not supported", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("build", format!("entry {i} is not finite")));
        }
        Ok(Tensor { shape: shape.to_vec(), values: values.into(), node: None })
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(&[], vec![v])
    }

    pub fn vector(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(&[n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            values.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![T::zero(); n].into(), node: None }
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![T::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = T::one();
        }
        Tensor { shape: vec![n, n], values: v.into(), node: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Arc<[T]>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values, node }
    }

    pub(crate) fn shared_values(&self) -> Arc<[T]> {
        Arc::clone(&self.values)
    }
}

impl<T: Copy> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values.to_vec()
    }

    /// Row count of a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a matrix, length of a vector, 1 for scalars.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols() + j]
    }

    /// The single value of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.values.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Same values, no graph handle.
    pub fn detach(&self) -> Self {
        Tensor { shape: self.shape.clone(), values: Arc::clone(&self.values), node: None }
    }
}

impl<T: PartialEq> PartialEq for Tensor<T> {
    /// Compares shape and values; the graph handle is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values[..] == other.values[..]
    }
}
