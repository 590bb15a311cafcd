use ndarray::ArrayView2;

use super::{DuplexError, DuplexLm, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradCheck {
    pub name: String,
    pub analytic_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub rel_err: f64,
}

/// Central differences of the pooled loss against the analytic gradient,
/// for every value of every tensor. The step is `h · max(1, |θ|)`.
pub fn finite_difference_check(
    model: &DuplexLm,
    windows: &[ArrayView2<u32>],
    weights: &LossWeights,
    h: f64,
) -> Result<Vec<TensorGradCheck>, DuplexError> {
    let mut grads = model.params().zeros_like();
    model.batch_loss(windows, weights, Some(&mut grads))?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (i, g) in grads.params.iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..g.data.len() {
            let orig = probe.params().params[i].data[j];
            let step = h * orig.abs().max(1.0);
            probe.params_mut().params[i].data[j] = orig + step;
            let up = probe.batch_loss(windows, weights, None)?.total();
            probe.params_mut().params[i].data[j] = orig - step;
            let down = probe.batch_loss(windows, weights, None)?.total();
            probe.params_mut().params[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            diff2 += (numeric - g.data[j]).powi(2);
            a2 += g.data[j].powi(2);
            n2 += numeric.powi(2);
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_err = if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom };
        out.push(TensorGradCheck { name: g.name.clone(), analytic_norm: a2.sqrt(), rel_err });
    }
    Ok(out)
}
