//! Dense BFGS minimizer with Armijo backtracking.
//!
//! Shared by MAP hyperparameter estimation, the Bayesian-optimization inner
//! and surrogate fits, and ARIMA conditional-sum-of-squares refinement. The
//! objective callback may return `None` to mark a rejected state (failed
//! factorization, out-of-support parameters); the line search treats those
//! points as +∞.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::{real, Scalar};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("objective rejected the starting point")]
    InfeasibleStart,
    #[error("objective returned a non-finite value at the starting point")]
    NonFiniteStart,
}

#[derive(Debug, Clone)]
pub struct OptimOptions<T: Scalar> {
    pub max_iters: usize,
    /// Euclidean gradient-norm stopping tolerance.
    pub grad_tol: T,
}

impl<T: Scalar> OptimOptions<T> {
    pub fn new(max_iters: usize, grad_tol: T) -> Self {
        Self {
            max_iters,
            grad_tol,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult<T: Scalar> {
    pub x: DVector<T>,
    pub value: T,
    pub grad_norm: T,
    pub iterations: usize,
    /// True when the gradient tolerance was reached before the budget.
    pub converged: bool,
}

/// Minimizes `f` from `x0` by BFGS with backtracking line search.
///
/// Descent is monotone: the returned value never exceeds `f(x0)`.
pub fn minimize<T, F>(
    mut f: F,
    x0: &DVector<T>,
    opts: &OptimOptions<T>,
) -> Result<OptimResult<T>, OptimError>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Option<(T, DVector<T>)>,
{
    let n = x0.len();
    let (mut value, mut grad) = f(x0).ok_or(OptimError::InfeasibleStart)?;
    if !value.is_finite_scalar() {
        return Err(OptimError::NonFiniteStart);
    }
    let mut x = x0.clone();
    let mut h_inv: DMatrix<T> = DMatrix::identity(n, n);

    let c1: T = real(1e-4);
    let shrink: T = real(0.5);
    let mut iterations = 0;
    let mut converged = grad.norm() <= opts.grad_tol;

    while iterations < opts.max_iters && !converged {
        iterations += 1;

        let mut direction = -(&h_inv * &grad);
        let mut slope = direction.dot(&grad);
        if !(slope < T::zero()) || !slope.is_finite_scalar() {
            // Curvature information went stale; fall back to steepest descent.
            h_inv = DMatrix::identity(n, n);
            direction = -grad.clone();
            slope = -grad.norm_squared();
            if slope == T::zero() {
                break;
            }
        }

        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let candidate = &x + &direction * step;
            if let Some((cand_value, cand_grad)) = f(&candidate) {
                if cand_value.is_finite_scalar() && cand_value <= value + c1 * step * slope {
                    accepted = Some((candidate, cand_value, cand_grad));
                    break;
                }
            }
            step *= shrink;
        }

        let Some((new_x, new_value, new_grad)) = accepted else {
            break; // no acceptable step in this direction
        };

        let s = &new_x - &x;
        let y = &new_grad - &grad;
        let sy = s.dot(&y);
        if sy > real::<T>(1e-12) * s.norm() * y.norm() {
            // BFGS inverse-Hessian update.
            let rho = T::one() / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv = h_inv - (&hys + hys.transpose()) * rho + &ss * (rho * rho * yhy + rho);
        }

        x = new_x;
        value = new_value;
        grad = new_grad;
        converged = grad.norm() <= opts.grad_tol;
    }

    Ok(OptimResult {
        grad_norm: grad.norm(),
        x,
        value,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_bowl_converges_to_center() {
        let f = |x: &DVector<f64>| {
            let d0 = x[0] - 1.5;
            let d1 = x[1] + 0.5;
            Some((
                2.0 * d0 * d0 + 0.5 * d1 * d1,
                DVector::from_vec(vec![4.0 * d0, d1]),
            ))
        };
        let result = minimize(
            f,
            &DVector::from_vec(vec![10.0, -7.0]),
            &OptimOptions::new(200, 1e-10),
        )
        .unwrap();
        assert!(result.converged);
        assert_relative_eq!(result.x[0], 1.5, epsilon = 1e-8);
        assert_relative_eq!(result.x[1], -0.5, epsilon = 1e-8);
    }

    #[test]
    fn rosenbrock_reaches_optimum() {
        let f = |x: &DVector<f64>| {
            let (a, b) = (x[0], x[1]);
            let value = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = DVector::from_vec(vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]);
            Some((value, g))
        };
        let result = minimize(
            f,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &OptimOptions::new(500, 1e-8),
        )
        .unwrap();
        assert!(result.value < 1e-12, "value {}", result.value);
        assert_relative_eq!(result.x[0], 1.0, epsilon = 1e-5);
        assert_relative_eq!(result.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn rejected_region_is_avoided() {
        // Objective only defined inside the ball |x| < 2; minimum at x = 1.
        let f = |x: &DVector<f64>| {
            if x.norm() >= 2.0 {
                return None;
            }
            let d = x[0] - 1.0;
            Some((d * d, DVector::from_vec(vec![2.0 * d])))
        };
        let result = minimize(
            f,
            &DVector::from_vec(vec![-1.5]),
            &OptimOptions::new(100, 1e-10),
        )
        .unwrap();
        assert_relative_eq!(result.x[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn infeasible_start_is_an_error() {
        let f = |_: &DVector<f64>| None::<(f64, DVector<f64>)>;
        assert!(matches!(
            minimize(f, &DVector::from_vec(vec![0.0]), &OptimOptions::new(10, 1e-6)),
            Err(OptimError::InfeasibleStart)
        ));
    }

    #[test]
    fn descent_is_monotone() {
        let f = |x: &DVector<f64>| {
            let v = x[0].powi(4) + x[0].powi(2);
            Some((v, DVector::from_vec(vec![4.0 * x[0].powi(3) + 2.0 * x[0]])))
        };
        let start_value = f(&DVector::from_vec(vec![3.0])).unwrap().0;
        let result = minimize(
            f,
            &DVector::from_vec(vec![3.0]),
            &OptimOptions::new(50, 1e-12),
        )
        .unwrap();
        assert!(result.value <= start_value);
        assert!(result.x[0].abs() < 1e-4);
    }
}
