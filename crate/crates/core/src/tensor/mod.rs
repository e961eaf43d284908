//! Dense N-D tensors with a tape-based reverse-mode differentiation engine
//! and the 3-D layer primitives used by the networks.
//!
//! Five-dimensional tensors use the NCDHW layout (batch, channel, z, y, x)
//! with x fastest, which is exactly the voxel order of [`crate::volio::Volume`],
//! so moving a volume into a tensor is a reshape.
//!
//! Training runs in `f32`; gradient checks instantiate the same code with
//! `f64`.

mod checkpoint;
pub(crate) mod kernels;
mod tape;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use kernels::{ConvGeom, Padding, PoolGeom};
pub use tape::{Act, Gradients, LossKind, Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + Send + Sync + Debug + Sum + 'static
{
    /// `C ← alpha·A·B + beta·C` over strided row/column layouts.
    ///
    /// # Safety
    /// Every element addressed by the shapes and strides must lie inside the
    /// buffers, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::of(v)).collect())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// `[N, C, D, H, W]` extents of a five-dimensional tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        self.shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("expected a 5-D tensor, got {:?}", self.shape)))
    }
}

/// Samples `Normal(0, 2 / fan_in)`, deterministic per seed.
pub fn he_normal_init<T: Scalar>(shape: Vec<usize>, fan_in: usize, seed: u64) -> Tensor<T> {
    assert!(fan_in >= 1, "fan_in must be >= 1");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_of(t: &Tensor<f64>) -> f64 {
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn he_normal_moments() {
        let t: Tensor<f64> = he_normal_init(vec![100_000], 27, 7);
        let expected = (2.0f64 / 27.0).sqrt();
        assert!((std_of(&t) / expected - 1.0).abs() < 0.02);

        let a: Tensor<f64> = he_normal_init(vec![100_000], 50, 1);
        let b: Tensor<f64> = he_normal_init(vec![100_000], 100, 2);
        let ratio = std_of(&a) / std_of(&b);
        assert!((ratio - 2f64.sqrt()).abs() < 0.02 * 2f64.sqrt());
    }

    #[test]
    fn he_normal_is_deterministic() {
        let a: Tensor<f32> = he_normal_init(vec![3, 4], 9, 42);
        let b: Tensor<f32> = he_normal_init(vec![3, 4], 9, 42);
        assert_eq!(a, b);
        let c: Tensor<f32> = he_normal_init(vec![3, 4], 9, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(t.clone().reshape(vec![6]).is_ok());
        assert!(t.reshape(vec![7]).is_err());
    }
}
