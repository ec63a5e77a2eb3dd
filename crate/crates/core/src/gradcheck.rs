//! Central-difference gradient oracle used to verify every analytic
//! backward pass.

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i`.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let indices: Vec<usize> = (0..x.numel()).collect();
    let partial = finite_diff_at(&mut f, x, eps, &indices)?;
    Tensor::new(x.shape(), partial)
}

/// Central differences at selected flat indices only.
pub fn finite_diff_at<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<T>> {
    if !(eps > 0.0) {
        return Err(CoreError::Oracle(format!("eps must be positive, got {eps}")));
    }
    let h = lit::<T>(eps);
    let two_h = lit::<T>(2.0 * eps);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::Oracle(format!("non-finite objective around element {i}")));
        }
        out.push((plus - minus) / two_h);
    }
    Ok(out)
}

/// Fourth-order five-point stencil at selected flat indices. Truncation
/// error is `O(eps^4)`, so deep networks with sharp curvature (batch norm over
/// few elements) still agree with the analytic gradient to ~1e-9.
pub fn finite_diff_at_5pt<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<T>> {
    if !(eps > 0.0) {
        return Err(CoreError::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe[i];
        let mut at = |k: f64| {
            probe.data_mut()[i] = orig + lit::<T>(k * eps);
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        probe.data_mut()[i] = orig;
        if ![p2, p1, m1, m2].iter().all(|v| v.is_finite()) {
            return Err(CoreError::Oracle(format!("non-finite objective around element {i}")));
        }
        let num = m2 - p2 + lit::<T>(8.0) * (p1 - m1);
        out.push(num / lit::<T>(12.0 * eps));
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Compare the analytic gradient of a scalar tape function against central
/// differences for every input. Returns the relative error per input.
pub fn check_tape_fn<T: Real>(
    inputs: &[Tensor<T>],
    eps: f64,
    build: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::no_grad();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == idx { probe.clone() } else { x.clone() }))
                    .collect();
                match build(&mut t, &vs) {
                    Ok(o) => t.value(o)[0],
                    Err(_) => T::nan(),
                }
            },
            &inputs[idx],
            eps,
        )?;
        errs.push(relative_error(analytic.data(), numeric.data()));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_squared_norm_returns_input() {
        let x = Tensor::<f64>::from_fn(&[5], |i| (i as f64).sin());
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-5).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let x = Tensor::<f64>::from_fn(&[3], |i| 0.3 * i as f64 - 0.2);
        let g = finite_diff_at_5pt(|t| t.data().iter().map(|v| v.powi(4)).sum(), &x, 1e-2, &[0, 1, 2]).unwrap();
        for (a, b) in g.iter().zip(x.data()) {
            assert!((a - 4.0 * b.powi(3)).abs() < 1e-10, "{a} vs {}", 4.0 * b.powi(3));
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Tensor::<f64>::zeros(&[1]);
        let err = finite_diff_grad(|t| 1.0 / (t[0] + 1e-3).max(0.0), &x, 1e-2);
        assert!(matches!(err, Err(CoreError::Oracle(_))));
    }
}
