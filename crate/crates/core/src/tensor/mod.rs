//! Dense NCHW tensors, a reverse-mode tape, and the layer/optimizer kernels
//! the residual networks are built from.

mod conv;
mod graph;
mod optim;
mod resize;

pub use conv::{conv2d_forward, same_padding};
pub use graph::{BatchNormState, Graph, NormMode, Var, BN_EPS, BN_MOMENTUM};
pub(crate) use graph::{permute_locations as graph_permute, softmax_rows};
pub use optim::{LrSchedule, OptimizerState};
pub use resize::bilinear_resize;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;

use crate::error::{EscError, Result};

/// Element type of a tensor. Training runs in `f32`; the gradient-check
/// harness runs the same kernels in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k && b >= k * n && c >= m * n, "gemm buffer too small");
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), b.len(), c.len());
        // SAFETY: callers pass dense buffers whose extents cover the strided
        // m×k, k×n and m×n views; checked above for the dense layouts used here.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), b.len(), c.len());
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major N-dimensional array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EscError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(EscError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Extents of a 4-D NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(EscError::Shape(format!(
                "expected NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Copy of sample `i` along the leading axis, keeping a leading extent of 1.
    pub fn sample(&self, i: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| EscError::Shape("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::join(items, shape)
    }

    /// Concatenates tensors along their existing leading axis.
    pub fn concat(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| EscError::Shape("cannot concatenate zero tensors".into()))?;
        let mut shape = first.shape.clone();
        if shape.is_empty() {
            return Err(EscError::Shape("cannot concatenate scalars".into()));
        }
        shape[0] = items.iter().map(|t| t.shape.first().copied().unwrap_or(0)).sum();
        Self::join(items, shape)
    }

    fn join(items: &[Tensor<T>], shape: Vec<usize>) -> Result<Self> {
        let inner = &items[0].shape[usize::from(shape.len() == items[0].shape.len())..];
        let mut data = Vec::with_capacity(shape.iter().product());
        for t in items {
            if t.shape.len() != items[0].shape.len() || &t.shape[t.shape.len() - inner.len()..] != inner {
                return Err(EscError::Shape("joined tensors differ in shape".into()));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(shape, data)
    }
}
