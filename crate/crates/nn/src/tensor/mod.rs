//! Dense arrays, masked convolution, a tape-based reverse-mode graph and Adam.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub(crate) mod conv;
pub mod gradcheck;
mod graph;
mod optim;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use thiserror::Error;

pub use conv::{conv2d_masked, MaskKind, MaskedConvSpec};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Checkpoint, CheckpointEntry, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gated activation needs an even channel count, got {0}")]
    OddChannelCount(usize),
    #[error("graph already consumed by an earlier backward pass")]
    GraphConsumed,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn mismatch(what: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch(what.into())
}

/// Floating-point element type.
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + 'static {
    const DTYPE: &'static str;

    /// `c = a·b + beta·c` for row/column-strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
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

    fn write_le(data: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Option<Vec<Self>>;

    fn of(v: f64) -> Self {
        Self::from(v).expect("representable")
    }

    /// `exp`, allowed to trade the last ulp or two for speed.
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    /// `tanh` through a single exponential; several times cheaper than libm.
    #[inline]
    fn tanh_fast(self) -> Self {
        let two = Self::one() + Self::one();
        Self::one() - two / ((self + self).exp_fast() + Self::one())
    }

    #[inline]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp_fast())
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path, $n:literal $(, $extra:item)*) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;
            $($extra)*

            fn gemm_raw(
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
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, rsc, csc) as usize <= c.len(), "gemm: output out of bounds");
                // SAFETY: every index the kernel touches lies inside the spans checked above.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }

            fn write_le(data: &[Self], out: &mut Vec<u8>) {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn read_le(bytes: &[u8]) -> Option<Vec<Self>> {
                if bytes.len() % $n != 0 {
                    return None;
                }
                Some(bytes.chunks_exact($n).map(|c| <$t>::from_le_bytes(c.try_into().unwrap())).collect())
            }
        }
    };
}

impl_real!(
    f32,
    "f32",
    matrixmultiply::sgemm,
    4,
    // Range reduction to r in [-ln2/2, ln2/2] plus a degree-6 polynomial;
    // branch-free so loops over slices vectorize.
    #[inline]
    fn exp_fast(self) -> f32 {
        const ROUND: f32 = 12_582_912.0; // 1.5·2²³
        let x = self.clamp(-87.0, 88.0);
        let k = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - k * 0.693_145_75 - k * 1.428_606_8e-6;
        let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        p * f32::from_bits(((k as i32 + 127) << 23) as u32)
    }
);
impl_real!(f64, "f64", matrixmultiply::dgemm, 8);

/// Row-major matrix product. `a` is `m×k` (or `k×m` stored, if `ta`), `b`
/// is `k×n` (or `n×k` stored, if `tb`); the result is written into the
/// row-major `m×n` buffer `c`, added to it when `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], accumulate: bool) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch(format!("{} values for shape {:?}", data.len(), shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from(*v).unwrap()).collect() }
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.sample(normal))).collect();
        Tensor { shape: shape.to_vec(), data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0; 4];
        matmul(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4., 5., 10., 11.]);
        // aᵀ stored as 3×2
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let mut d = [1.0; 4];
        matmul(2, 3, 2, &at, true, &b, false, &mut d, true);
        assert_eq!(d, [5., 6., 11., 12.]);
        // bᵀ stored as 2×3
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        let mut e = [0.0; 4];
        matmul(2, 3, 2, &a, false, &bt, true, &mut e, false);
        assert_eq!(e, [4., 5., 10., 11.]);
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let (a, b) = (x.exp_fast(), x.exp());
            assert!(((a - b) / b).abs() < 1e-6, "{x}: {a} vs {b}");
            x += 0.0137;
        }
        assert_eq!(1000.0f32.tanh_fast(), 1.0);
        assert_eq!((-1000.0f32).tanh_fast(), -1.0);
        assert_eq!((-1000.0f32).sigmoid(), 0.0f32.max((-1000.0f32).sigmoid()));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.reshaped(&[3, 2]).unwrap().shape(), &[3, 2]);
    }
}
