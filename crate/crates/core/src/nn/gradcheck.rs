//! Central finite-difference gradient checking at 64-bit precision.
//!
//! Ops are reduced to a scalar by a fixed random weighting of their outputs,
//! `sum_i w_i * y_i`, so the upstream gradient handed to `backward` is `w`.
//! A plain sum would leave some ops (instance norm) with an identically
//! zero input gradient and nothing to compare.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    l1_loss, squared_error_loss, Conv1d, ConvTranspose1d, GradMode, Gru, InstanceNorm, Tensor,
};

/// Default perturbation for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`, where `n` is the
/// central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` and `a` the
/// analytic gradient.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

pub fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// An op whose input and parameter gradients can be checked numerically.
pub trait Differentiable {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64>;
    /// Input gradient and freshly computed parameter gradients (in the order
    /// of [`Differentiable::param_values`]) for upstream gradient `dy`.
    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>);
    fn param_values(&mut self) -> Vec<&mut Tensor<f64>>;
}

fn random_like(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Worst relative error over the input and every parameter of `op` at `x`.
pub fn check_gradients<D: Differentiable>(op: &mut D, x: &Tensor<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = op.forward(x);
    let w = random_like(y.shape(), &mut rng);
    let (dx, grads) = op.backward(x, &w);

    let shape = x.shape().to_vec();
    let mut worst = finite_diff_check(
        |p| weighted_sum(&op.forward(&Tensor::from_vec(&shape, p.to_vec()).unwrap()), &w),
        x.data(),
        dx.data(),
        DEFAULT_STEP,
    );
    for (i, g) in grads.iter().enumerate() {
        let base = op.param_values()[i].clone();
        let err = finite_diff_check(
            |p| {
                *op.param_values()[i] = Tensor::from_vec(base.shape(), p.to_vec()).unwrap();
                weighted_sum(&op.forward(x), &w)
            },
            base.data(),
            g.data(),
            DEFAULT_STEP,
        );
        *op.param_values()[i] = base;
        worst = worst.max(err);
    }
    worst
}

impl Differentiable for Conv1d<f64> {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        Conv1d::forward(self, x).expect("conv forward")
    }

    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        self.weight.zero_grad();
        self.bias.zero_grad();
        let dx = Conv1d::backward(self, x, dy, GradMode::ALL).expect("conv backward").expect("input grad");
        (dx, vec![self.weight.grad.clone(), self.bias.grad.clone()])
    }

    fn param_values(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.weight.value, &mut self.bias.value]
    }
}

impl Differentiable for ConvTranspose1d<f64> {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        ConvTranspose1d::forward(self, x).expect("transposed conv forward")
    }

    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        self.weight.zero_grad();
        self.bias.zero_grad();
        let dx = ConvTranspose1d::backward(self, x, dy, GradMode::ALL)
            .expect("transposed conv backward")
            .expect("input grad");
        (dx, vec![self.weight.grad.clone(), self.bias.grad.clone()])
    }

    fn param_values(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.weight.value, &mut self.bias.value]
    }
}

impl Differentiable for InstanceNorm<f64> {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        InstanceNorm::forward(self, x).expect("instance norm forward")
    }

    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        self.gain.zero_grad();
        self.bias.zero_grad();
        let dx = InstanceNorm::backward(self, x, dy, GradMode::ALL)
            .expect("instance norm backward")
            .expect("input grad");
        (dx, vec![self.gain.grad.clone(), self.bias.grad.clone()])
    }

    fn param_values(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.gain.value, &mut self.bias.value]
    }
}

/// A GRU together with its initial state; the state is checked like a
/// parameter.
pub struct GruProbe {
    pub gru: Gru<f64>,
    pub state0: Tensor<f64>,
}

impl Differentiable for GruProbe {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.gru.forward(x, Some(&self.state0)).expect("gru forward").0
    }

    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, cache) = self.gru.forward(x, Some(&self.state0)).expect("gru forward");
        for p in self.gru.params_mut() {
            p.zero_grad();
        }
        let (dx, dh0) = self.gru.backward(x, &cache, dy, GradMode::ALL).expect("gru backward");
        let mut grads: Vec<Tensor<f64>> = self.gru.params().iter().map(|p| p.grad.clone()).collect();
        grads.push(dh0);
        (dx.expect("input grad"), grads)
    }

    fn param_values(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut v: Vec<&mut Tensor<f64>> = self.gru.params_mut().into_iter().map(|p| &mut p.value).collect();
        v.push(&mut self.state0);
        v
    }
}

/// Mean absolute error against a target that is itself differentiated (the
/// cycle loss and the auto-encoder reconstruction error of the equilibrium
/// discriminator).
pub struct L1Head {
    pub target: Tensor<f64>,
}

impl Differentiable for L1Head {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let (v, _, _) = l1_loss(x, &self.target).expect("l1");
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, mut dx, mut dt) = l1_loss(x, &self.target).expect("l1");
        dx.scale(dy.data()[0]);
        dt.scale(dy.data()[0]);
        (dx, vec![dt])
    }

    fn param_values(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.target]
    }
}

/// Least-squares head `mean((s - target)^2)` used by the patch
/// discriminators.
pub struct SquaredErrorHead {
    pub target: f64,
}

impl Differentiable for SquaredErrorHead {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let (v, _) = squared_error_loss(x, self.target);
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
        let (_, mut dx) = squared_error_loss(x, self.target);
        dx.scale(dy.data()[0]);
        (dx, Vec::new())
    }

    fn param_values(&mut self) -> Vec<&mut Tensor<f64>> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = [0.3, -1.2, 2.0];
        let err = finite_diff_check(|p| p.iter().map(|v| 3.0 * v).sum(), &x, &[3.0, 3.0, 3.0], DEFAULT_STEP);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_a_gradient_off_by_two() {
        let x = [0.5, -0.25];
        let err = finite_diff_check(|p| p.iter().map(|v| v * v).sum(), &x, &[2.0, -1.0], DEFAULT_STEP);
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }
}
