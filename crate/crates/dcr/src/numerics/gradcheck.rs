use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the largest elementwise relative error
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        let y = g.scalar(out);
        if !y.is_finite() {
            return Err(Error::Evaluation(format!(
                "function value {y} is not finite"
            )));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let y = g.scalar(out);
    if !y.is_finite() {
        return Err(Error::Evaluation(format!(
            "function value {y} is not finite"
        )));
    }
    g.backward(out);
    let analytic = g
        .grad(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
