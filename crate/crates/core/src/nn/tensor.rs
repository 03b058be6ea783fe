use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::NnError;

/// Scalar types the network code runs on: `f32` for training, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// The strides must describe in-bounds views of the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    /// Hyperbolic tangent; single precision trades the last ulp for speed.
    fn fast_tanh(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    unsafe fn raw_gemm(
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

    fn fast_tanh(self) -> f32 {
        super::act::tanh_f32(self)
    }
}

impl Real for f64 {
    unsafe fn raw_gemm(
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

/// Row-major `c (m x n) = op(a) * op(b) + beta * c`, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. With `ta` set, `a` is stored as `k x m`;
/// with `tb` set, `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[R],
    ta: bool,
    b: &[R],
    tb: bool,
    beta: R,
    c: &mut [R],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        R::raw_gemm(
            m,
            k,
            n,
            R::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor, usually shaped `(batch, channels, time)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![R::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: R) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// `(batch, channels, time)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize), NnError> {
        match self.shape[..] {
            [b, c, t] => Ok((b, c, t)),
            _ => Err(NnError::ShapeMismatch(format!(
                "expected rank-3 (batch, channels, time), got {:?}",
                self.shape
            ))),
        }
    }

    pub fn fill(&mut self, value: R) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), NnError> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: R) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<(), NnError> {
        if self.shape != shape {
            return Err(NnError::ShapeMismatch(format!(
                "expected {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    /// Errors with the op name if any value is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<(), NnError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFinite(op))
        }
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().fold(R::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| S::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Concatenates two `(B, C, T)` tensors along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self, NnError> {
        let (ba, ca, ta) = a.dims3()?;
        let (bb, cb, tb) = b.dims3()?;
        if ba != bb || ta != tb {
            return Err(NnError::ShapeMismatch(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..ba {
            data.extend_from_slice(&a.data[i * ca * ta..(i + 1) * ca * ta]);
            data.extend_from_slice(&b.data[i * cb * ta..(i + 1) * cb * ta]);
        }
        Ok(Self {
            shape: vec![ba, ca + cb, ta],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `first` channels and
    /// the rest.
    pub fn split_channels(&self, first: usize) -> Result<(Self, Self), NnError> {
        let (b, c, t) = self.dims3()?;
        if first > c {
            return Err(NnError::ShapeMismatch(format!(
                "cannot split {first} channels from {c}"
            )));
        }
        let mut lo = Vec::with_capacity(b * first * t);
        let mut hi = Vec::with_capacity(b * (c - first) * t);
        for i in 0..b {
            let item = &self.data[i * c * t..(i + 1) * c * t];
            lo.extend_from_slice(&item[..first * t]);
            hi.extend_from_slice(&item[first * t..]);
        }
        Ok((
            Self {
                shape: vec![b, first, t],
                data: lo,
            },
            Self {
                shape: vec![b, c - first, t],
                data: hi,
            },
        ))
    }

    /// Keeps the first `len` time steps of a `(B, C, T)` tensor.
    pub fn crop_time(&self, len: usize) -> Result<Self, NnError> {
        let (b, c, t) = self.dims3()?;
        if len > t {
            return Err(NnError::ShapeMismatch(format!("cannot crop {t} steps to {len}")));
        }
        if len == t {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(b * c * len);
        for row in self.data.chunks_exact(t) {
            data.extend_from_slice(&row[..len]);
        }
        Ok(Self {
            shape: vec![b, c, len],
            data,
        })
    }

    /// Zero-pads the time axis of a `(B, C, T)` tensor on the right.
    pub fn pad_time(&self, len: usize) -> Result<Self, NnError> {
        let (b, c, t) = self.dims3()?;
        if len < t {
            return Err(NnError::ShapeMismatch(format!("cannot pad {t} steps to {len}")));
        }
        let mut data = Vec::with_capacity(b * c * len);
        for row in self.data.chunks_exact(t) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(R::zero()).take(len - t));
        }
        Ok(Self {
            shape: vec![b, c, len],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_all_transpose_combinations() {
        // a = [[1,2,3],[4,5,6]] (2x3), b = [[1,0],[0,1],[1,1]] (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expected = [4.0, 5.0, 10.0, 11.0];
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0f64; 4];
                gemm(2, 3, 2, aa, ta, bb, tb, 0.0, &mut c);
                assert_eq!(c, expected);
            }
        }
        let mut c = [1.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::from_vec(&[2, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 2], vec![5.0f32, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0]);
        let (x, y) = c.split_channels(1).unwrap();
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn crop_and_pad_time() {
        let a = Tensor::from_vec(&[1, 2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = a.crop_time(2).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 4.0, 5.0]);
        let p = c.pad_time(3).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 0.0, 4.0, 5.0, 0.0]);
        assert!(a.crop_time(4).is_err());
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut t = Tensor::<f32>::zeros(&[1, 1, 2]);
        assert!(t.check_finite("x").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(matches!(t.check_finite("x"), Err(NnError::NonFinite("x"))));
    }
}
