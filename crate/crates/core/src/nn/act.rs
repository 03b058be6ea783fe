use super::{Real, Tensor};

/// Negative-side slope of the leaky ReLU used throughout the models.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let slope = R::lit(LEAKY_SLOPE);
    x.map(|v| if v > R::zero() { v } else { v * slope })
}

/// Gradient through a leaky ReLU, given its input.
pub fn leaky_relu_backward<R: Real>(x: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
    let slope = R::lit(LEAKY_SLOPE);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > R::zero() { g } else { g * slope })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn tanh<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(tanh_scalar)
}

pub fn tanh_scalar<R: Real>(v: R) -> R {
    v.fast_tanh()
}

/// Odd rational minimax approximation `x P(x^2) / Q(x^2)` on the clamped
/// range `|x| <= 7.905`, accurate to a few ulp; branch-free so map loops
/// vectorize.
pub(crate) fn tanh_f32(v: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const P: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_672e-11,
        2.000_188e-13,
        -2.760_768_5e-16,
    ];
    const Q: [f32; 4] = [4.893_525_2e-3, 2.268_434_7e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let x = v.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let p = P.iter().rev().fold(0.0f32, |acc, &c| acc * x2 + c);
    let q = Q.iter().rev().fold(0.0f32, |acc, &c| acc * x2 + c);
    x * p / q
}

/// Gradient through tanh, given its output.
pub fn tanh_backward<R: Real>(y: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| g * (R::one() - v * v))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}
