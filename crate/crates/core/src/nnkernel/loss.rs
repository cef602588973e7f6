//! Scalar losses with analytic gradients.

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid cross-entropy on a logit, in the overflow-safe log-sum-exp form:
/// loss = max(z,0) - z*c + ln(1 + exp(-|z|)). Returns (loss, dloss/dlogit).
pub fn sigmoid_ce(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let grad = sigmoid(logit) - target;
    (loss, grad)
}

/// Squared error (target - pred)^2. Returns (loss, dloss/dpred).
pub fn squared_loss(pred: f64, target: f64) -> (f64, f64) {
    let d = target - pred;
    (d * d, -2.0 * d)
}
