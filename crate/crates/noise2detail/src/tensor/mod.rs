//! Dense NCHW tensors with just enough machinery for a three-layer
//! convolutional denoiser: convolution, ReLU, elementwise arithmetic,
//! mean-squared error, reverse-mode differentiation, and Adam.

pub mod adam;
pub mod conv;
pub mod tape;

use std::fmt;

use crate::error::{Error, Result};

/// Element type of the numeric engine.
///
/// Production code runs on `f32`; the finite-difference test oracles
/// instantiate the same kernels at `f64`, where differencing noise is far
/// below the tolerances being checked.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + fmt::Debug + Send + Sync + 'static
{
    /// General matrix multiply `c = alpha * a @ b + beta * c` with explicit
    /// row/column strides, dispatching to the tuned kernel for the type.
    ///
    /// # Safety
    /// Pointers must be valid for the given dimensions and strides, and the
    /// output must not alias the inputs.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Shape of a dense NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A 1x1x1x1 scalar shape.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from raw row-major data; length must match the shape.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: format!("{} elements for shape {shape}", shape.len()),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    /// A 1x1x1x1 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::item",
                expected: "1 element".into(),
                got: format!("shape {}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Gradient buffer, if one has been populated.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Ensure a zero-initialized gradient buffer exists and return it.
    pub fn ensure_grad(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Move the gradient buffer out as a plain tensor.
    pub fn take_grad(&mut self) -> Option<Tensor<T>> {
        self.grad.take().map(|g| Tensor {
            shape: self.shape,
            data: g,
            grad: None,
        })
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, for diagnostics.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// One image plane (fixed batch and channel indices) as a slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Cast every element (exact for f32 -> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from(v.to_f64().unwrap()).unwrap())
                .collect(),
            grad: None,
        }
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    context: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context,
            expected: a.shape().to_string(),
            got: b.shape().to_string(),
        });
    }
    Ok(())
}

/// Mean of squared differences, accumulated in f64 by default.
///
/// `mse` is symmetric in `(a, b)` and rejects shape mismatches.
pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same_shape("mse", a, b)?;
    Ok(mse_unchecked(a.data(), b.data(), true))
}

/// Same as [`mse`] but with selectable accumulator precision: `f64_accum`
/// sums squares in f64, otherwise in the element type itself.
pub fn mse_with_accum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f64_accum: bool) -> Result<T> {
    check_same_shape("mse", a, b)?;
    Ok(mse_unchecked(a.data(), b.data(), f64_accum))
}

pub(crate) fn mse_unchecked<T: Scalar>(a: &[T], b: &[T], f64_accum: bool) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return T::zero();
    }
    if f64_accum {
        let mut acc = 0.0f64;
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = (x - y).to_f64().unwrap();
            acc += d * d;
        }
        T::from(acc / n as f64).unwrap()
    } else {
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = x - y;
            acc = acc + d * d;
        }
        acc / T::from(n).unwrap()
    }
}

/// Rectified linear unit, elementwise.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}
