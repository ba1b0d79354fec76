use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with step `h`, returning the largest relative error
/// `|a - n| / max(1e-8, |a| + |n|)` over all coordinates.
///
/// `f` receives a fresh graph and the leaf holding the point. Non-scalar
/// outputs are summed in `f64`, so returning the unreduced output avoids an
/// `f32` rounding of the total. The numeric derivative divides by the step
/// actually representable in `f32`.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    let seed = Tensor::full(g.shape(out), 1.0);
    g.backward(out, Some(&seed))?;
    let analytic = g.grad_or_zeros(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p);
        let out = f(&mut g, x)?;
        let v = g.value(out).sum();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "function value at a probe point".into(),
            });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x0 = point.data()[i];
        let (xp, xm) = (x0 + h, x0 - h);
        let mut plus = point.clone();
        plus.data_mut()[i] = xp;
        let mut minus = point.clone();
        minus.data_mut()[i] = xm;
        let numeric = (eval(plus)? - eval(minus)?) / (xp as f64 - xm as f64);
        let a = analytic.data()[i] as f64;
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel.is_nan() {
            return Err(Error::NonFinite {
                context: format!("relative error at coordinate {i}"),
            });
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}
