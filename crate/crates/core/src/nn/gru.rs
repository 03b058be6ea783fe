//! Unidirectional GRU over the time axis of a `(B, C, T)` tensor.
//!
//! Gate order in the stacked weights is reset, update, candidate:
//!
//! ```text
//! r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = z * h + (1 - z) * n
//! ```

use rand::Rng;

use super::{gemm, tanh_scalar, GradMode, NnError, Param, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Gru<R> {
    /// `(3H, C)`
    pub w_ih: Param<R>,
    /// `(3H, H)`
    pub w_hh: Param<R>,
    pub b_ih: Param<R>,
    pub b_hh: Param<R>,
}

/// Per-step activations kept for backpropagation through time. Matrices are
/// stored hidden-major, `[h * B + b]`.
#[derive(Clone, Debug)]
pub struct GruCache<R> {
    batch: usize,
    steps: usize,
    /// `h_0 .. h_T`
    hidden: Vec<Vec<R>>,
    reset: Vec<Vec<R>>,
    update: Vec<Vec<R>>,
    candidate: Vec<Vec<R>>,
    /// `W_hn h + b_hn`
    hidden_cand: Vec<Vec<R>>,
}

fn sigmoid<R: Real>(v: R) -> R {
    R::one() / (R::one() + (-v).exp())
}

impl<R: Real> Gru<R> {
    /// Weights uniform in `±1/sqrt(hidden)`, biases zero.
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self, NnError> {
        if input == 0 || hidden == 0 {
            return Err(NnError::BadConfig("GRU sizes must be positive".into()));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: Param::uniform(format!("{name}.w_ih"), &[3 * hidden, input], bound, rng),
            w_hh: Param::uniform(format!("{name}.w_hh"), &[3 * hidden, hidden], bound, rng),
            b_ih: Param::zeros(format!("{name}.b_ih"), &[3 * hidden]),
            b_hh: Param::zeros(format!("{name}.b_hh"), &[3 * hidden]),
        })
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.value.shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.value.shape()[1]
    }

    fn check(&self, x: &Tensor<R>) -> Result<(usize, usize), NnError> {
        let (b, c, t) = x.dims3()?;
        if c != self.input_size() {
            return Err(NnError::ShapeMismatch(format!(
                "GRU expects {} input channels, got {c}",
                self.input_size()
            )));
        }
        Ok((b, t))
    }

    /// Runs left to right from `state0` (`(B, H)`, zeros if absent) and
    /// returns every hidden state as `(B, H, T)`.
    pub fn forward(&self, x: &Tensor<R>, state0: Option<&Tensor<R>>) -> Result<(Tensor<R>, GruCache<R>), NnError> {
        let (b, t_len) = self.check(x)?;
        let c = self.input_size();
        let h = self.hidden_size();
        let tb = t_len * b;

        let mut h0 = vec![R::zero(); h * b];
        if let Some(s) = state0 {
            s.expect_shape(&[b, h])?;
            for bi in 0..b {
                for hi in 0..h {
                    h0[hi * b + bi] = s.data()[bi * h + hi];
                }
            }
        }

        // Input projections for all steps at once, columns ordered t * B + b.
        let xm = time_major(x, b, c, t_len);
        let mut xp = vec![R::zero(); 3 * h * tb];
        gemm(3 * h, c, tb, self.w_ih.value.data(), false, &xm, false, R::zero(), &mut xp);
        let b_ih = self.b_ih.value.data();
        let b_hh = self.b_hh.value.data();

        let mut cache = GruCache {
            batch: b,
            steps: t_len,
            hidden: Vec::with_capacity(t_len + 1),
            reset: Vec::with_capacity(t_len),
            update: Vec::with_capacity(t_len),
            candidate: Vec::with_capacity(t_len),
            hidden_cand: Vec::with_capacity(t_len),
        };
        cache.hidden.push(h0);
        let mut hp = vec![R::zero(); 3 * h * b];
        for t in 0..t_len {
            let prev = cache.hidden.last().unwrap();
            gemm(3 * h, h, b, self.w_hh.value.data(), false, prev, false, R::zero(), &mut hp);
            let mut r = vec![R::zero(); h * b];
            let mut z = vec![R::zero(); h * b];
            let mut n = vec![R::zero(); h * b];
            let mut hn = vec![R::zero(); h * b];
            let mut next = vec![R::zero(); h * b];
            for hi in 0..h {
                for bi in 0..b {
                    let i = hi * b + bi;
                    let col = t * b + bi;
                    let xr = xp[hi * tb + col] + b_ih[hi];
                    let xz = xp[(h + hi) * tb + col] + b_ih[h + hi];
                    let xn = xp[(2 * h + hi) * tb + col] + b_ih[2 * h + hi];
                    r[i] = sigmoid(xr + hp[hi * b + bi] + b_hh[hi]);
                    z[i] = sigmoid(xz + hp[(h + hi) * b + bi] + b_hh[h + hi]);
                    hn[i] = hp[(2 * h + hi) * b + bi] + b_hh[2 * h + hi];
                    n[i] = tanh_scalar(xn + r[i] * hn[i]);
                    next[i] = z[i] * prev[i] + (R::one() - z[i]) * n[i];
                }
            }
            cache.reset.push(r);
            cache.update.push(z);
            cache.candidate.push(n);
            cache.hidden_cand.push(hn);
            cache.hidden.push(next);
        }

        let mut y = Tensor::zeros(&[b, h, t_len]);
        let yd = y.data_mut();
        for (t, hs) in cache.hidden[1..].iter().enumerate() {
            for hi in 0..h {
                for bi in 0..b {
                    yd[(bi * h + hi) * t_len + t] = hs[hi * b + bi];
                }
            }
        }
        y.check_finite("gru")?;
        Ok((y, cache))
    }

    /// Backpropagation through time. Returns the input gradient (if
    /// requested) and the gradient with respect to `state0` as `(B, H)`.
    pub fn backward(
        &mut self,
        x: &Tensor<R>,
        cache: &GruCache<R>,
        dy: &Tensor<R>,
        mode: GradMode,
    ) -> Result<(Option<Tensor<R>>, Tensor<R>), NnError> {
        let (b, t_len) = self.check(x)?;
        if b != cache.batch || t_len != cache.steps {
            return Err(NnError::ShapeMismatch("GRU cache does not match input".into()));
        }
        let c = self.input_size();
        let h = self.hidden_size();
        dy.expect_shape(&[b, h, t_len])?;
        let tb = t_len * b;
        let one = R::one();

        let mut dxp = vec![R::zero(); 3 * h * tb];
        let mut dhp = vec![R::zero(); 3 * h * b];
        let mut dh = vec![R::zero(); h * b];
        let mut dprev = vec![R::zero(); h * b];
        for t in (0..t_len).rev() {
            let (r, z, n, hn) = (&cache.reset[t], &cache.update[t], &cache.candidate[t], &cache.hidden_cand[t]);
            let prev = &cache.hidden[t];
            for hi in 0..h {
                for bi in 0..b {
                    let i = hi * b + bi;
                    let g = dh[i] + dy.data()[(bi * h + hi) * t_len + t];
                    let dn = g * (one - z[i]);
                    let dz = g * (prev[i] - n[i]);
                    let dn_pre = dn * (one - n[i] * n[i]);
                    let dr = dn_pre * hn[i];
                    let dr_pre = dr * r[i] * (one - r[i]);
                    let dz_pre = dz * z[i] * (one - z[i]);
                    let col = t * b + bi;
                    dxp[hi * tb + col] = dr_pre;
                    dxp[(h + hi) * tb + col] = dz_pre;
                    dxp[(2 * h + hi) * tb + col] = dn_pre;
                    dhp[hi * b + bi] = dr_pre;
                    dhp[(h + hi) * b + bi] = dz_pre;
                    dhp[(2 * h + hi) * b + bi] = dn_pre * r[i];
                    dprev[i] = g * z[i];
                }
            }
            if mode.params {
                gemm(3 * h, b, h, &dhp, false, prev, true, R::one(), self.w_hh.grad.data_mut());
                let db = self.b_hh.grad.data_mut();
                for (row, acc) in dhp.chunks_exact(b).zip(db.iter_mut()) {
                    for &v in row {
                        *acc += v;
                    }
                }
            }
            // dh_{t-1} = z * g + W_hh^T dhp
            gemm(h, 3 * h, b, self.w_hh.value.data(), true, &dhp, false, R::zero(), &mut dh);
            for (a, &p) in dh.iter_mut().zip(&dprev) {
                *a += p;
            }
        }

        if mode.params {
            let xm = time_major(x, b, c, t_len);
            gemm(3 * h, tb, c, &dxp, false, &xm, true, R::one(), self.w_ih.grad.data_mut());
            let db = self.b_ih.grad.data_mut();
            for (row, acc) in dxp.chunks_exact(tb).zip(db.iter_mut()) {
                for &v in row {
                    *acc += v;
                }
            }
        }

        let mut dh0 = Tensor::zeros(&[b, h]);
        for hi in 0..h {
            for bi in 0..b {
                dh0.data_mut()[bi * h + hi] = dh[hi * b + bi];
            }
        }

        if !mode.input {
            return Ok((None, dh0));
        }
        let mut dxm = vec![R::zero(); c * tb];
        gemm(c, 3 * h, tb, self.w_ih.value.data(), true, &dxp, false, R::zero(), &mut dxm);
        let mut dx = Tensor::zeros(&[b, c, t_len]);
        let dxd = dx.data_mut();
        for ci in 0..c {
            for t in 0..t_len {
                for bi in 0..b {
                    dxd[(bi * c + ci) * t_len + t] = dxm[ci * tb + t * b + bi];
                }
            }
        }
        Ok((Some(dx), dh0))
    }

    pub fn params(&self) -> [&Param<R>; 4] {
        [&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn params_mut(&mut self) -> [&mut Param<R>; 4] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

/// `(C, T * B)` with columns ordered `t * B + b`.
fn time_major<R: Real>(x: &Tensor<R>, b: usize, c: usize, t_len: usize) -> Vec<R> {
    let mut out = vec![R::zero(); c * t_len * b];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..c {
            let src = &xd[(bi * c + ci) * t_len..(bi * c + ci + 1) * t_len];
            for (t, &v) in src.iter().enumerate() {
                out[ci * t_len * b + t * b + bi] = v;
            }
        }
    }
    out
}
