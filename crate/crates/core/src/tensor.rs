//! Dense row-major tensors and the scalar trait the engine is generic over.
//!
//! Images are laid out `[N, H, W, C]` (channels last). A single image is
//! simply a batch of one.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{ensure, Result};

/// Floating-point element type. Implemented for `f32` (training, storage)
/// and `f64` (gradient oracles, statistics).
pub trait Real:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` on raw strided buffers.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`, each described by row and
    /// column strides.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every Real")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("Real always converts to f64")
    }
}

fn check_gemm_bounds(
    len: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
    what: &str,
) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand {what} out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
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
                check_gemm_bounds(a.len(), m, k, rsa, csa, "a");
                check_gemm_bounds(b.len(), k, n, rsb, csb, "b");
                check_gemm_bounds(c.len(), m, n, rsc, csc, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every accessed offset was bounds-checked above.
                unsafe {
                    $f(
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

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {shape:?} needs {numel} elements, got {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the trailing (channel) axis.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Size of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            "shape mismatch: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::of(x.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Items `[start, end)` along the batch axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        }
    }

    /// Stack along the batch axis. All parts must share trailing dims.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            ensure!(&p.shape[1..] == tail, "concat shape mismatch");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}

/// Elementwise `a*x + b*y` with one coefficient pair per batch item.
///
/// This is the single kernel behind every two-term linear combination of
/// images, so graph and non-graph code paths agree bit for bit.
pub fn axpby_per_item<T: Real>(a: &[T], x: &[T], b: &[T], y: &[T], out: &mut [T]) {
    let n = a.len();
    let per = x.len() / n.max(1);
    for i in 0..n {
        let (ai, bi) = (a[i], b[i]);
        let r = i * per..(i + 1) * per;
        for ((o, &xv), &yv) in out[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&y[r]) {
            *o = ai * xv + bi * yv;
        }
    }
}

/// Convex mix `r*a + (1-r)*b`, `r` holding one value per pixel broadcast over
/// the trailing channel axis.
pub fn mix_kernel<T: Real>(a: &[T], b: &[T], r: &[T], channels: usize, out: &mut [T]) {
    for (p, &rv) in r.iter().enumerate() {
        let s = p * channels..(p + 1) * channels;
        for ((o, &av), &bv) in out[s.clone()].iter_mut().zip(&a[s.clone()]).zip(&b[s]) {
            *o = rv * av + (T::one() - rv) * bv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let a = [1.5f32, -2.0, 0.25, 9.0];
        let b = [3.0f32, 7.0, -1.0, 0.5];
        let mut out = [0.0f32; 4];
        mix_kernel(&a, &b, &[0.0, 0.0], 2, &mut out);
        assert_eq!(out, b);
        mix_kernel(&a, &b, &[1.0, 1.0], 2, &mut out);
        assert_eq!(out, a);
    }
}
