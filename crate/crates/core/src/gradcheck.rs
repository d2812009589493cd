//! Central-finite-difference verification of analytic gradients.
//!
//! Used throughout the test suites to pin every differentiable op and the
//! full training loss against an independent numeric derivative.

use crate::tensor::{no_grad, Parameter, Tensor};

/// Relative-or-absolute error between an analytic and a numeric derivative.
///
/// Components whose magnitude is below `1e-6` are compared absolutely so
/// that zero gradients do not produce spurious relative blow-ups.
fn component_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > 1e-6 {
        diff / scale
    } else {
        diff
    }
}

/// Checks `d f / d x` for a scalar-valued `f` of a flat input vector.
///
/// Returns the worst per-component error between the recorded gradient and
/// a central difference with step `h = 1e-6`.
pub fn grad_check(xs: &[f64], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    grad_check_h(xs, 1e-6, f)
}

pub fn grad_check_h(xs: &[f64], h: f64, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let n = xs.len();
    let x = Tensor::variable(xs.to_vec(), &[n]).expect("grad_check input");
    let loss = f(&x);
    assert_eq!(loss.numel(), 1, "grad_check needs a scalar loss");
    loss.backward().expect("grad_check backward");
    let analytic = x.grad().expect("input received no gradient");

    let eval = |v: Vec<f64>| -> f64 {
        no_grad(|| f(&Tensor::from_vec(v, &[n]).unwrap())).item()
    };
    let mut worst = 0.0_f64;
    for i in 0..n {
        let mut plus = xs.to_vec();
        plus[i] += h;
        let mut minus = xs.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        worst = worst.max(component_err(analytic[i], numeric));
    }
    worst
}

/// Checks the gradient of a scalar loss with respect to every listed
/// parameter, perturbing each component in place.
///
/// `f` must rebuild the forward graph from the parameters' current data on
/// every call.
pub fn grad_check_params(params: &[&Parameter], h: f64, f: impl Fn() -> Tensor) -> f64 {
    let loss = f();
    assert_eq!(loss.numel(), 1, "grad_check_params needs a scalar loss");
    for p in params {
        p.tensor().zero_grad();
    }
    loss.backward().expect("grad_check_params backward");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor().grad().unwrap_or_else(|| vec![0.0; p.tensor().numel()]))
        .collect();

    let mut worst = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.tensor().to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            p.tensor().set_data(&plus).unwrap();
            let fp = no_grad(&f).item();
            let mut minus = base.clone();
            minus[i] -= h;
            p.tensor().set_data(&minus).unwrap();
            let fm = no_grad(&f).item();
            p.tensor().set_data(&base).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(component_err(analytic[pi][i], numeric));
        }
    }
    worst
}
