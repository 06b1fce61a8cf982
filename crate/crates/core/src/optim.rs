//! BFGS minimisation with a backtracking Armijo line search.
//!
//! Objective and gradient are supplied as fallible closures so that a
//! non-finite likelihood inside the line search shrinks the step instead of
//! aborting the fit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once `max_i |g_i| < grad_tol`.
    pub grad_tol: f64,
    /// Stop once the relative objective change falls below this and the
    /// gradient is also below `accept_grad_tol`.
    pub rel_tol: f64,
    pub accept_grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
            rel_tol: 1e-10,
            accept_grad_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BfgsOutcome {
    pub fn gradient_norm(&self) -> f64 {
        inf_norm(&self.gradient)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

/// Minimises `f` starting at `x0`.
pub fn minimize<F, G>(f: F, grad: G, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x0)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("objective {fx} at the starting point")));
    }
    let initial_value = fx;
    let mut g = DVector::from_vec(grad(x.as_slice())?);
    let mut inv_h = DMatrix::<f64>::identity(n, n);
    let mut first_step = true;

    let mut iterations = 0;
    let mut converged = inf_norm(g.as_slice()) < opts.grad_tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut dir = -(&inv_h * &g);
        let mut slope = g.dot(&dir);
        if slope.is_nan() || slope >= 0.0 {
            // Lost descent: restart from steepest descent.
            inv_h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
            first_step = true;
        }
        let mut step = if first_step {
            (1.0 / inf_norm(g.as_slice())).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let trial = &x + &dir * step;
            if let Ok(ft) = f(trial.as_slice()) {
                if ft.is_finite() && ft <= fx + ARMIJO_C1 * step * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            converged = inf_norm(g.as_slice()) < opts.accept_grad_tol;
            break;
        };
        let g_new = DVector::from_vec(grad(x_new.as_slice())?);

        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if first_step {
                inv_h = DMatrix::identity(n, n) * (sy / yv.dot(&yv));
                first_step = false;
            }
            let rho = 1.0 / sy;
            let hy = &inv_h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            inv_h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            inv_h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }

        let rel_change = (fx - f_new).abs() / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        let gnorm = inf_norm(g.as_slice());
        converged = gnorm < opts.grad_tol || (rel_change < opts.rel_tol && gnorm < opts.accept_grad_tol);
    }

    Ok(BfgsOutcome {
        x: x.as_slice().to_vec(),
        value: fx,
        initial_value,
        gradient: g.as_slice().to_vec(),
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::central_gradient;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| -> Result<f64> {
            Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        };
        let g = |x: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        };
        let out = minimize(f, g, &[-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] - 1.0).abs() < 1e-4);
        assert!(out.value <= out.initial_value);
    }

    #[test]
    fn quadratic_with_numeric_gradient() {
        let f = |x: &[f64]| -> Result<f64> {
            Ok(3.0 * (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2) + x[0] * x[1])
        };
        let g = |x: &[f64]| central_gradient(&f, x);
        let out = minimize(f, g, &[0.0, 0.0], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        // ∇ = 0: 6(x0-2) + x1 = 0, 2(x1+1) + x0 = 0
        let x1 = -4.0 / (2.0 - 1.0 / 6.0);
        let x0 = 2.0 - x1 / 6.0;
        assert!((out.x[0] - x0).abs() < 1e-5 && (out.x[1] - x1).abs() < 1e-5);
    }

    #[test]
    fn infeasible_region_shrinks_step() {
        let f = |x: &[f64]| -> Result<f64> {
            if x[0] <= 0.0 {
                Err(Error::NonFinite("log of non-positive".into()))
            } else {
                Ok(x[0] - 5.0 * x[0].ln())
            }
        };
        let g = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![1.0 - 5.0 / x[0]]) };
        let out = minimize(f, g, &[0.1], &BfgsOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 5.0).abs() < 1e-4);
    }
}
