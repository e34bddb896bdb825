//! Finite-difference validation of recorded gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`
    /// over the checked coordinates; 0 when both gradients vanish.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the gradient of the scalar `f(x)` recorded on a [`Graph`] with
/// central differences `(f(x+h e_i) - f(x-h e_i)) / 2h`.
///
/// At most `max_coords` coordinates are probed, evenly spaced across `x`.
/// The error is normalised by the largest gradient magnitude rather than per
/// coordinate, so near-zero entries do not amplify rounding noise.
pub fn grad_check<'a, F>(
    f: F,
    x: &Tensor,
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var>,
{
    ensure!(h > 0.0, Error::contract("grad_check step h must be positive"));

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    ensure!(
        g.value(out).len() == 1,
        Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.value(out).shape()
        ))
    );
    let grads = g.backward(out)?;
    let full = grads.get_or_zeros(xv, x);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let n = x.len();
    let probes = max_coords.unwrap_or(n).clamp(1, n);
    let checked: Vec<usize> = (0..probes).map(|i| i * n / probes).collect();
    let mut analytic = Vec::with_capacity(probes);
    let mut numeric = Vec::with_capacity(probes);
    for &i in &checked {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
        analytic.push(full.data()[i]);
    }

    let max_abs_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(&numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let max_rel_error = if scale == 0.0 { 0.0 } else { max_abs_error / scale };
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        checked,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert_eq!(r.analytic, [2.0, 4.0, 6.0]);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new([2], vec![0.5, -0.5]).unwrap();
        let r = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.analytic.iter().chain(&r.numeric).all(|&v| v == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let x = Tensor::zeros([3]);
        let err = grad_check(|_g, x| Ok(x), &x, 1e-5, None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
