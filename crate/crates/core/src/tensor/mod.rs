//! Dense tensors and the reverse-mode differentiation engine.
//!
//! The engine is generic over the element type: `f32` is the training
//! precision, `f64` backs gradient checks and oracle tests where
//! finite-difference verification needs the extra headroom.

mod gradcheck;
mod graph;
pub(crate) mod math;

pub use gradcheck::{grad_check, GradCheckReport, LeafCheck};
pub use graph::{Graph, NodeId, Padding};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

/// Element type of the engine: `f32` or `f64`.
pub trait Real:
    Float + NumCast + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to Real")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
///
/// Scalars are rank-0 tensors (empty shape, one element). Extents are
/// strictly positive; the element count always equals the product of the
/// extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: R) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: R) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// 2-D constructor from rows.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument(
                "from_rows: ragged row lengths".into(),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn scalar_value(&self) -> R {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element at (row, col) of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> R {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Lossless or rounding conversion between precisions.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| S::of_f64(x.as_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, R> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn new_rejects_count_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(3.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.scalar_value(), 3.5);
    }

    #[test]
    fn cast_f64_f32_f64() {
        let t = Tensor::<f64>::new(vec![2], vec![0.5, -1.25]).unwrap();
        let back: Tensor<f64> = t.cast::<f32>().cast();
        assert_eq!(t, back);
    }
}
