//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Storage is generic over [`Real`] (`f32` for training, `f64` when the
//! gradient checker needs clean central differences). Reductions always
//! accumulate in `f64`.

mod conv;
mod graph;
mod gradcheck;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{conv2d_forward, conv_output_size, ConvGeometry};
pub use graph::{BnStats, Graph, Var};
pub use gradcheck::{finite_diff_check, GradCheckReport};

/// Scalar element type of a [`Tensor`].
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
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
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                // SAFETY: the extents asserted above cover every index the
                // kernel touches; strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Sum of a slice with `f64` accumulation.
#[inline]
pub fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), numel);
        }
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Index of the `[n, ...]` sub-tensor along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Result<Tensor<T>> {
        let outer = self.shape[0];
        if index >= outer {
            return Err(Error::Invalid(format!("index {index} out of range for extent {outer}")));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stacks equally-shaped tensors whose leading extent is 1 into a batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack an empty list".into()))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut outer = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            outer += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        shape[0] = outer;
        Tensor::new(&shape, data)
    }
}

/// Numerically stable softmax of one logit row, accumulated in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest element; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
