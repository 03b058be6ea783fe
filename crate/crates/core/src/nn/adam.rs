use super::{NnError, Param, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `value` in place. `step` is the 1-based
/// index of this update.
pub fn adam_update<R: Real>(value: &mut [R], grad: &[R], m: &mut [R], v: &mut [R], step: u64, cfg: &AdamConfig) {
    let (b1, b2) = (R::lit(cfg.beta1), R::lit(cfg.beta2));
    let one = R::one();
    let c1 = R::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = R::lit(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (R::lit(cfg.lr), R::lit(cfg.eps));
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment estimates for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<R>>,
    pub second: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Param<R>>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.value.shape().to_vec()).collect();
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Applies one update using each parameter's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Param<R>]) -> Result<(), NnError> {
        if params.len() != self.first.len() {
            return Err(NnError::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.first).zip(&self.second) {
            if p.value.shape() != m.shape() || p.grad.shape() != v.shape() {
                return Err(NnError::ShapeMismatch(format!("moments do not match parameter {}", p.name)));
            }
        }
        self.step += 1;
        for ((p, m), v) in params.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            let Param { value, grad, .. } = &mut **p;
            adam_update(value.data_mut(), grad.data(), m.data_mut(), v.data_mut(), self.step, &self.config);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut p = Param::new("p", Tensor::from_vec(&[3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let before = p.value.clone();
        let mut opt = AdamState::new(AdamConfig::default(), [&p]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut value = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut value, &[0.02], &mut m, &mut v, 1, &AdamConfig::default());
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expected = -1e-4 * 0.02 / (0.02 + 1e-8);
        assert!((value[0] - expected).abs() < 1e-15);
        assert!((value[0] + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn repeated_updates_are_bitwise_deterministic() {
        let run = || {
            let mut p = Param::new("p", Tensor::from_vec(&[2], vec![0.3f32, -0.7]).unwrap());
            let mut opt = AdamState::new(AdamConfig::default(), [&p]);
            for i in 0..10 {
                p.grad = Tensor::from_vec(&[2], vec![0.1 * i as f32, -0.05]).unwrap();
                opt.step(&mut [&mut p]).unwrap();
            }
            (p.value, opt)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert_eq!(a.data()[1].to_bits(), b.data()[1].to_bits());
        assert_eq!(sa, sb);
    }

    #[test]
    fn rejects_mismatched_parameter_lists() {
        let p = Param::<f32>::zeros("p", &[2]);
        let mut q = Param::<f32>::zeros("q", &[3]);
        let mut opt = AdamState::new(AdamConfig::default(), [&p]);
        assert!(opt.step(&mut [&mut q]).is_err());
    }
}
