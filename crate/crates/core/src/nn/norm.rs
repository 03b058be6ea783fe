use super::{GradMode, NnError, Param, Real, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-(item, channel) normalization over time followed by a per-channel
/// affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm<R> {
    pub gain: Param<R>,
    pub bias: Param<R>,
}

impl<R: Real> InstanceNorm<R> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Tensor::filled(&[channels], R::one())),
            bias: Param::zeros(format!("{name}.bias"), &[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    fn check(&self, x: &Tensor<R>) -> Result<(usize, usize, usize), NnError> {
        let (b, c, t) = x.dims3()?;
        if c != self.channels() {
            return Err(NnError::ShapeMismatch(format!(
                "instance norm over {} channels got {c}",
                self.channels()
            )));
        }
        if t < 2 {
            return Err(NnError::ShapeMismatch("instance norm needs at least 2 time steps".into()));
        }
        Ok((b, c, t))
    }

    /// Mean and `1 / sqrt(var + eps)` of one row.
    fn row_stats(row: &[R]) -> (R, R) {
        let n = R::from_usize(row.len()).unwrap();
        let mut mean = R::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / n;
        let mut var = R::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var = var / n;
        (mean, R::one() / (var + R::lit(INSTANCE_NORM_EPS)).sqrt())
    }

    pub fn forward(&self, x: &Tensor<R>) -> Result<Tensor<R>, NnError> {
        let (_, c, t) = self.check(x)?;
        let mut y = x.clone();
        for (r, row) in y.data_mut().chunks_exact_mut(t).enumerate() {
            let ch = r % c;
            let (mean, inv) = Self::row_stats(row);
            let (g, b) = (self.gain.value.data()[ch], self.bias.value.data()[ch]);
            for v in row.iter_mut() {
                *v = g * (*v - mean) * inv + b;
            }
        }
        y.check_finite("instance_norm")?;
        Ok(y)
    }

    pub fn backward(
        &mut self,
        x: &Tensor<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<Option<Tensor<R>>, NnError> {
        let (_, c, t) = self.check(x)?;
        dy.expect_shape(x.shape())?;
        let n = R::from_usize(t).unwrap();
        let mut dx = Tensor::zeros(x.shape());
        for (r, (row, grow)) in x.data().chunks_exact(t).zip(dy.data().chunks_exact(t)).enumerate() {
            let ch = r % c;
            let (mean, inv) = Self::row_stats(row);
            let g = self.gain.value.data()[ch];
            let (mut sum_d, mut sum_dx) = (R::zero(), R::zero());
            for (&v, &d) in row.iter().zip(grow) {
                let xhat = (v - mean) * inv;
                sum_d += d;
                sum_dx += d * xhat;
            }
            if mode.params {
                self.gain.grad.data_mut()[ch] += sum_dx;
                self.bias.grad.data_mut()[ch] += sum_d;
            }
            if mode.input {
                let out = &mut dx.data_mut()[r * t..(r + 1) * t];
                for ((o, &v), &d) in out.iter_mut().zip(row).zip(grow) {
                    let xhat = (v - mean) * inv;
                    *o = g * inv * (d - sum_d / n - xhat * sum_dx / n);
                }
            }
        }
        Ok(mode.input.then_some(dx))
    }

    pub fn params(&self) -> [&Param<R>; 2] {
        [&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<R>; 2] {
        [&mut self.gain, &mut self.bias]
    }
}
