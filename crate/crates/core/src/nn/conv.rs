//! 1D convolution and transposed convolution as one GEMM over all kernel
//! taps followed by a shifted sum.

use std::ops::Range;

use rand::Rng;

use super::{gemm, he_uniform_bound, GradMode, NnError, Param, Real, Tensor};

/// Steps `i < count` whose tap position `i * stride + k - offset` lies in
/// `0..limit`.
fn tap_range(offset: usize, k: usize, stride: usize, limit: usize, count: usize) -> Range<usize> {
    let lo = offset.saturating_sub(k).div_ceil(stride);
    let hi = (limit + offset).saturating_sub(k).div_ceil(stride).min(count);
    lo..hi.max(lo)
}

/// `(c, b * t)` matrix view of a `(b, c, t)` tensor.
fn channel_major<R: Real>(x: &Tensor<R>, b: usize, c: usize, t: usize) -> Vec<R> {
    let mut out = vec![R::zero(); c * b * t];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * t + bi * t..ci * b * t + (bi + 1) * t].copy_from_slice(&xd[(bi * c + ci) * t..(bi * c + ci + 1) * t]);
        }
    }
    out
}

fn from_channel_major<R: Real>(m: &[R], b: usize, c: usize, t: usize) -> Tensor<R> {
    let mut x = Tensor::zeros(&[b, c, t]);
    let xd = x.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            xd[(bi * c + ci) * t..(bi * c + ci + 1) * t].copy_from_slice(&m[ci * b * t + bi * t..ci * b * t + (bi + 1) * t]);
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(kernel - 1) / 2` on the left; output length
    /// `ceil(T / stride)`. Requires an odd kernel.
    Same,
    /// No padding; output length `(T - kernel) / stride + 1`.
    Valid,
}

/// Cross-correlation over time: `y[b, o, t] = bias[o] + sum_{i, k}
/// w[o, i, k] * x[b, i, t * stride + k - pad]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub stride: usize,
    pub padding: Padding,
}

impl<R: Real> Conv1d<R> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let layer = Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel],
                he_uniform_bound(in_channels * kernel),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            stride,
            padding,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Builds a layer from explicit weights `(out, in, kernel)` and bias.
    pub fn from_weights(
        name: &str,
        weight: Tensor<R>,
        bias: Tensor<R>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self, NnError> {
        let layer = Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            stride,
            padding,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<(), NnError> {
        let shape = self.weight.value.shape();
        if shape.len() != 3 || shape[0] == 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(NnError::BadConfig(format!("conv weight shape {shape:?}")));
        }
        if self.bias.value.shape() != [shape[0]] {
            return Err(NnError::BadConfig("conv bias must match output channels".into()));
        }
        if self.stride == 0 {
            return Err(NnError::BadConfig("stride must be at least 1".into()));
        }
        if self.padding == Padding::Same && shape[2] % 2 == 0 {
            return Err(NnError::BadConfig(format!(
                "same padding needs an odd kernel, got {}",
                shape[2]
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn left_pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel() - 1) / 2,
            Padding::Valid => 0,
        }
    }

    pub fn output_len(&self, t: usize) -> Result<usize, NnError> {
        match self.padding {
            Padding::Same => Ok(t.div_ceil(self.stride)),
            Padding::Valid if t >= self.kernel() => Ok((t - self.kernel()) / self.stride + 1),
            Padding::Valid => Err(NnError::ShapeMismatch(format!(
                "valid convolution needs at least {} steps, got {t}",
                self.kernel()
            ))),
        }
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<(usize, usize, usize), NnError> {
        let (b, c, t) = x.dims3()?;
        if c != self.in_channels() {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok((b, t, self.output_len(t)?))
    }

    /// Weights regrouped as a `(cout * K, cin)` matrix, row `o * K + k`.
    fn stacked_weight(&self) -> Vec<R> {
        let (cout, cin, k_len) = (self.out_channels(), self.in_channels(), self.kernel());
        let w = self.weight.value.data();
        let mut out = vec![R::zero(); cout * k_len * cin];
        for o in 0..cout {
            for ci in 0..cin {
                for k in 0..k_len {
                    out[(o * k_len + k) * cin + ci] = w[(o * cin + ci) * k_len + k];
                }
            }
        }
        out
    }

    /// Every tap is applied to every input step with one GEMM,
    /// `z[(o, k), p] = sum_i w[o, i, k] * x[i, p]`, and the output gathers
    /// `y[o, t] = sum_k z[(o, k), t * stride + k - pad]`.
    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let (b, t_in, t_out) = self.check_input(x)?;
        let (cin, cout, k_len) = (self.in_channels(), self.out_channels(), self.kernel());
        let width = b * t_in;
        let xm = channel_major(x, b, cin, t_in);
        let mut z = vec![R::zero(); cout * k_len * width];
        gemm(cout * k_len, cin, width, &self.stacked_weight(), false, &xm, false, R::zero(), &mut z);

        let bias = self.bias.value.data();
        let mut y = Tensor::zeros(&[b, cout, t_out]);
        let yd = y.data_mut();
        for bi in 0..b {
            for o in 0..cout {
                let dst = &mut yd[(bi * cout + o) * t_out..(bi * cout + o + 1) * t_out];
                dst.iter_mut().for_each(|v| *v = bias[o]);
                for k in 0..k_len {
                    let row = &z[(o * k_len + k) * width + bi * t_in..(o * k_len + k) * width + (bi + 1) * t_in];
                    let r = tap_range(self.left_pad(), k, self.stride, t_in, t_out);
                    if r.is_empty() {
                        continue;
                    }
                    let first = (r.start * self.stride + k).saturating_sub(self.left_pad());
                    for (d, &v) in dst[r].iter_mut().zip(row[first..].iter().step_by(self.stride)) {
                        *d += v;
                    }
                }
            }
        }
        y.check_finite("conv1d")?;
        Ok(y)
    }

    /// Backward pass given the forward input `x` and upstream gradient `dy`.
    pub fn backward(
        &mut self,
        x: &Tensor<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<Option<Tensor<R>>, NnError> {
        let (b, t_in, t_out) = self.check_input(x)?;
        let (cin, cout, k_len) = (self.in_channels(), self.out_channels(), self.kernel());
        dy.expect_shape(&[b, cout, t_out])?;
        let width = b * t_in;

        // dy scattered back onto the input positions each tap read.
        let mut dz = vec![R::zero(); cout * k_len * width];
        let dyd = dy.data();
        for bi in 0..b {
            for o in 0..cout {
                let src = &dyd[(bi * cout + o) * t_out..(bi * cout + o + 1) * t_out];
                for k in 0..k_len {
                    let row = &mut dz[(o * k_len + k) * width + bi * t_in..(o * k_len + k) * width + (bi + 1) * t_in];
                    let r = tap_range(self.left_pad(), k, self.stride, t_in, t_out);
                    if r.is_empty() {
                        continue;
                    }
                    let first = (r.start * self.stride + k).saturating_sub(self.left_pad());
                    for (d, &g) in row[first..].iter_mut().step_by(self.stride).zip(&src[r]) {
                        *d = g;
                    }
                }
            }
        }

        if mode.params {
            let xm = channel_major(x, b, cin, t_in);
            let mut dw = vec![R::zero(); cout * k_len * cin];
            gemm(cout * k_len, width, cin, &dz, false, &xm, true, R::zero(), &mut dw);
            let grad = self.weight.grad.data_mut();
            for o in 0..cout {
                for ci in 0..cin {
                    for k in 0..k_len {
                        grad[(o * cin + ci) * k_len + k] += dw[(o * k_len + k) * cin + ci];
                    }
                }
            }
            let db = self.bias.grad.data_mut();
            for bi in 0..b {
                for o in 0..cout {
                    let mut s = R::zero();
                    for &v in &dyd[(bi * cout + o) * t_out..(bi * cout + o + 1) * t_out] {
                        s += v;
                    }
                    db[o] += s;
                }
            }
        }

        if !mode.input {
            return Ok(None);
        }
        let mut dxm = vec![R::zero(); cin * width];
        gemm(cin, cout * k_len, width, &self.stacked_weight(), true, &dz, false, R::zero(), &mut dxm);
        Ok(Some(from_channel_major(&dxm, b, cin, t_in)))
    }

    pub fn params(&self) -> [&Param<R>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<R>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution with output length exactly `T * stride`.
///
/// The full scatter `pos = i * stride + k` is shifted left by
/// `(kernel - 1) / 2` and truncated to `T * stride` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose1d<R> {
    /// Shape `(in, out, kernel)`.
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub stride: usize,
}

impl<R: Real> ConvTranspose1d<R> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let fan_in = (in_channels * kernel).div_ceil(stride.max(1));
        let layer = Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[in_channels, out_channels, kernel],
                he_uniform_bound(fan_in),
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            stride,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn from_weights(name: &str, weight: Tensor<R>, bias: Tensor<R>, stride: usize) -> Result<Self, NnError> {
        let layer = Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            stride,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<(), NnError> {
        let shape = self.weight.value.shape();
        if shape.len() != 3 || shape.iter().any(|&d| d == 0) {
            return Err(NnError::BadConfig(format!("transposed conv weight shape {shape:?}")));
        }
        if self.bias.value.shape() != [shape[1]] {
            return Err(NnError::BadConfig("bias must match output channels".into()));
        }
        if self.stride == 0 {
            return Err(NnError::BadConfig("stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    fn crop(&self) -> usize {
        (self.kernel() - 1) / 2
    }

    pub fn output_len(&self, t: usize) -> usize {
        t * self.stride
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<(usize, usize), NnError> {
        let (b, c, t) = x.dims3()?;
        if c != self.in_channels() {
            return Err(NnError::ShapeMismatch(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok((b, t))
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let (b, t_in) = self.check_input(x)?;
        let (cin, cout, k_len) = (self.in_channels(), self.out_channels(), self.kernel());
        let t_out = self.output_len(t_in);
        let width = b * t_in;
        let xm = channel_major(x, b, cin, t_in);
        let mut z = vec![R::zero(); cout * k_len * width];
        gemm(cout * k_len, cin, width, self.weight.value.data(), true, &xm, false, R::zero(), &mut z);

        let bias = self.bias.value.data();
        let mut y = Tensor::zeros(&[b, cout, t_out]);
        let yd = y.data_mut();
        let crop = self.crop();
        for bi in 0..b {
            for o in 0..cout {
                let dst = &mut yd[(bi * cout + o) * t_out..(bi * cout + o + 1) * t_out];
                dst.iter_mut().for_each(|v| *v = bias[o]);
                for k in 0..k_len {
                    let row = &z[(o * k_len + k) * width + bi * t_in..(o * k_len + k) * width + (bi + 1) * t_in];
                    let r = tap_range(crop, k, self.stride, t_out, t_in);
                    if r.is_empty() {
                        continue;
                    }
                    let first = (r.start * self.stride + k).saturating_sub(crop);
                    for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(&row[r]) {
                        *d += v;
                    }
                }
            }
        }
        y.check_finite("conv1d_transpose")?;
        Ok(y)
    }

    pub fn backward(
        &mut self,
        x: &Tensor<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<Option<Tensor<R>>, NnError> {
        let (b, t_in) = self.check_input(x)?;
        let (cin, cout, k_len) = (self.in_channels(), self.out_channels(), self.kernel());
        let t_out = self.output_len(t_in);
        dy.expect_shape(&[b, cout, t_out])?;
        let width = b * t_in;
        let crop = self.crop();

        let mut dz = vec![R::zero(); cout * k_len * width];
        let dyd = dy.data();
        for bi in 0..b {
            for o in 0..cout {
                let src = &dyd[(bi * cout + o) * t_out..(bi * cout + o + 1) * t_out];
                for k in 0..k_len {
                    let row = &mut dz[(o * k_len + k) * width + bi * t_in..(o * k_len + k) * width + (bi + 1) * t_in];
                    let r = tap_range(crop, k, self.stride, t_out, t_in);
                    if r.is_empty() {
                        continue;
                    }
                    let first = (r.start * self.stride + k).saturating_sub(crop);
                    for (d, &g) in row[r].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                        *d = g;
                    }
                }
            }
        }

        if mode.params {
            let xm = channel_major(x, b, cin, t_in);
            gemm(cin, width, cout * k_len, &xm, false, &dz, true, R::one(), self.weight.grad.data_mut());
            let db = self.bias.grad.data_mut();
            for bi in 0..b {
                for o in 0..cout {
                    let mut s = R::zero();
                    for &v in &dyd[(bi * cout + o) * t_out..(bi * cout + o + 1) * t_out] {
                        s += v;
                    }
                    db[o] += s;
                }
            }
        }

        if !mode.input {
            return Ok(None);
        }
        let mut dxm = vec![R::zero(); cin * width];
        gemm(cin, cout * k_len, width, self.weight.value.data(), false, &dz, false, R::zero(), &mut dxm);
        Ok(Some(from_channel_major(&dxm, b, cin, t_in)))
    }

    pub fn params(&self) -> [&Param<R>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<R>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
