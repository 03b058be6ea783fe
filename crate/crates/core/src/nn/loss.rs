use super::{NnError, Real, Tensor};

/// Mean absolute error `mean |pred - target|` and its gradients with respect
/// to `pred` and `target`.
pub fn l1_loss<R: Real>(pred: &Tensor<R>, target: &Tensor<R>) -> Result<(R, Tensor<R>, Tensor<R>), NnError> {
    pred.expect_shape(target.shape())?;
    let n = R::from_usize(pred.len().max(1)).unwrap();
    let mut sum = R::zero();
    let mut dpred = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d.abs();
        dpred.push(if d > R::zero() {
            R::one() / n
        } else if d < R::zero() {
            -R::one() / n
        } else {
            R::zero()
        });
    }
    let dtarget = dpred.iter().map(|&g| -g).collect();
    Ok((
        sum / n,
        Tensor::from_vec(pred.shape(), dpred)?,
        Tensor::from_vec(pred.shape(), dtarget)?,
    ))
}

/// `mean((s - target)^2)` against a constant target, with its gradient.
pub fn squared_error_loss<R: Real>(scores: &Tensor<R>, target: R) -> (R, Tensor<R>) {
    let n = R::from_usize(scores.len().max(1)).unwrap();
    let two = R::lit(2.0);
    let mut sum = R::zero();
    let grad = scores.map(|s| two * (s - target) / n);
    for &s in scores.data() {
        sum += (s - target) * (s - target);
    }
    (sum / n, grad)
}
