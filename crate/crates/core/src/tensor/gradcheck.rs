use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the backward rules reachable from `f` at `x`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// scalar. The analytic gradient comes from one backward pass; the numeric
/// one from the sixth-order central difference
/// `(45·(f(x+h) - f(x-h)) - 9·(f(x+2h) - f(x-2h)) + (f(x+3h) - f(x-3h))) / 60h`
/// with `h = eps` along every coordinate. The O(h⁶) truncation error permits
/// steps of 1e-3..1e-2 in 64-bit mode, which keeps cancellation noise small
/// next to the 1e-8 floor of [`relative_error`].
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Input(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    let xv = tape.leaf(&leaf);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape
        .grad(xv)
        .expect("differentiable leaf has a gradient")
        .iter()
        .map(|v| v.to_f64())
        .collect();

    let eval = |data: Vec<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let v = tape.leaf(&t);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out).to_f64())
    };

    let base = x.data().to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let at = |step: f64| -> Result<f64> {
            let mut data = base.clone();
            data[i] = T::from_f64(base[i].to_f64() + step);
            eval(data)
        };
        // differences first, so a coordinate the loss ignores gives exactly 0
        let d1 = at(eps)? - at(-eps)?;
        let d2 = at(2.0 * eps)? - at(-2.0 * eps)?;
        let d3 = at(3.0 * eps)? - at(-3.0 * eps)?;
        let d = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * eps);
        numeric.push(d);
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
