//! Dense row-major tensors and the raw kernels behind the autodiff tape.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type. `f32` is the training precision; `f64` is
/// used only for gradient verification.
pub trait Element:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + 'static
{
    fn lift(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b` for `a[m×k]`, `b[k×n]` given as (row, column) strides
    /// into the slices; `c` is dense row-major `m×n` and is overwritten.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]);
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], sa: (isize, isize), b: &[T], sb: (isize, isize), c: &[T]) {
    let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize + 1
    };
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0);
    assert!(m * k == 0 || extent(m, k, sa) <= a.len(), "gemm: lhs too short");
    assert!(k * n == 0 || extent(k, n, sb) <= b.len(), "gemm: rhs too short");
    assert_eq!(c.len(), m * n, "gemm: output size");
}

impl Element for f32 {
    #[inline]
    fn lift(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: check_gemm verified every strided access stays inside the slices
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 0.0, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}

impl Element for f64 {
    #[inline]
    fn lift(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: check_gemm verified every strided access stays inside the slices
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 0.0, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting a shape/length mismatch and non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernel outputs; finiteness is a debug check.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite tensor produced with shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::from_parts(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self::from_parts(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::dim(format!("expected a scalar, got shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        if let Some(same) = (self as &dyn std::any::Any).downcast_ref::<Tensor<U>>() {
            return same.clone();
        }
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lift(v.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

pub(crate) mod kernels {
    use super::Element;

    /// `a[m×k] · b[k×n]`.
    pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out);
        out
    }

    /// `aᵀ · g` for `a[m×k]`, `g[m×n]`; result is `k×n`.
    pub fn matmul_tn<T: Element>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); k * n];
        T::gemm(k, m, n, a, (1, k as isize), g, (n as isize, 1), &mut out);
        out
    }

    /// `g · bᵀ` for `g[m×n]`, `b[k×n]`; result is `m×k`.
    pub fn matmul_nt<T: Element>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * k];
        T::gemm(m, n, k, g, (n as isize, 1), b, (1, n as isize), &mut out);
        out
    }

    #[inline]
    pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
        a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    /// Tanh approximation of GELU.
    #[inline]
    pub fn gelu<T: Element>(x: T) -> T {
        let c = T::lift(GELU_C);
        let a = T::lift(GELU_A);
        let half = T::lift(0.5);
        half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
    }

    #[inline]
    pub fn gelu_grad<T: Element>(x: T) -> T {
        let c = T::lift(GELU_C);
        let a = T::lift(GELU_A);
        let half = T::lift(0.5);
        let three = T::lift(3.0);
        let u = c * (x + a * x * x * x);
        let t = u.tanh();
        let du = c * (T::one() + three * a * x * x);
        half * (T::one() + t) + half * x * (T::one() - t * t) * du
    }

    #[inline]
    pub fn sigmoid<T: Element>(z: T) -> T {
        if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        }
    }
}
