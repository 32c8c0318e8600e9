//! Spectral mixture kernel, its RBF reduction, spectral density utilities,
//! kernel matrices, and analytic hyperparameter gradients.
//!
//! The stationary kernel is a mixture of `Q` spectral Gaussians,
//!
//! ```text
//! k(τ) = Σ_q w_q · exp(−2π²τ²v_q²) · cos(2πτμ_q)
//! ```
//!
//! where `w_q` carries signal-variance units, `μ_q` is a frequency in cycles
//! per unit time, and `v_q` is the standard deviation of the q-th spectral
//! Gaussian (so `1/v_q` acts as a length scale). The spectral density dual to
//! `k` is the symmetrized Gaussian mixture evaluated by [`spectral_density`].

use nalgebra::DMatrix;
use thiserror::Error;

use crate::scalar::{real, Scalar};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
}

/// Hyperparameters of a Q-component spectral mixture kernel.
///
/// All three lists have length `Q ≥ 1`; weights and scales are strictly
/// positive, frequencies nonnegative, everything finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SmKernelParams<T: Scalar> {
    weights: Vec<T>,
    frequencies: Vec<T>,
    scales: Vec<T>,
}

impl<T: Scalar> SmKernelParams<T> {
    pub fn new(
        weights: Vec<T>,
        frequencies: Vec<T>,
        scales: Vec<T>,
    ) -> Result<Self, KernelError> {
        let q = weights.len();
        if q == 0 {
            return Err(KernelError::InvalidParams(
                "at least one mixture component is required".into(),
            ));
        }
        if frequencies.len() != q || scales.len() != q {
            return Err(KernelError::InvalidParams(format!(
                "component lists differ in length: {} weights, {} frequencies, {} scales",
                q,
                frequencies.len(),
                scales.len()
            )));
        }
        for (name, list) in [
            ("weight", &weights),
            ("frequency", &frequencies),
            ("scale", &scales),
        ] {
            if let Some(bad) = list.iter().find(|v| !v.is_finite_scalar()) {
                return Err(KernelError::InvalidParams(format!(
                    "non-finite {name}: {bad:?}"
                )));
            }
        }
        if weights.iter().any(|&w| w <= T::zero()) {
            return Err(KernelError::InvalidParams("weights must be positive".into()));
        }
        if scales.iter().any(|&v| v <= T::zero()) {
            return Err(KernelError::InvalidParams("scales must be positive".into()));
        }
        if frequencies.iter().any(|&m| m < T::zero()) {
            return Err(KernelError::InvalidParams(
                "frequencies must be nonnegative".into(),
            ));
        }
        Ok(Self {
            weights,
            frequencies,
            scales,
        })
    }

    pub fn q(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn frequencies(&self) -> &[T] {
        &self.frequencies
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    /// `k(0) = Σ_q w_q`, the prior signal variance.
    pub fn total_weight(&self) -> T {
        self.weights.iter().fold(T::zero(), |acc, &w| acc + w)
    }
}

/// Observation-noise variance `σ_ε²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParam<T: Scalar>(T);

impl<T: Scalar> NoiseParam<T> {
    pub fn new(sigma_eps_sq: T) -> Result<Self, KernelError> {
        if !(sigma_eps_sq > T::zero()) || !sigma_eps_sq.is_finite_scalar() {
            return Err(KernelError::InvalidParams(format!(
                "noise variance must be positive and finite, got {sigma_eps_sq:?}"
            )));
        }
        Ok(Self(sigma_eps_sq))
    }

    pub fn variance(self) -> T {
        self.0
    }
}

/// Evaluates the spectral mixture kernel at lag `tau`.
///
/// Computed through `|τ|`, so `k(τ)` and `k(−τ)` are bit-identical.
pub fn sm_kernel<T: Scalar>(params: &SmKernelParams<T>, tau: T) -> T {
    let tau = tau.abs();
    let tau_sq = tau * tau;
    let neg_two_pi_sq: T = real(-2.0 * std::f64::consts::PI * std::f64::consts::PI);
    let two_pi: T = real(2.0 * std::f64::consts::PI);
    let mut acc = T::zero();
    for q in 0..params.q() {
        let v = params.scales[q];
        let decay = (neg_two_pi_sq * tau_sq * v * v).exp();
        let phase = (two_pi * tau * params.frequencies[q]).cos();
        acc += params.weights[q] * decay * phase;
    }
    acc
}

/// Analytic kernel gradient, taken in log space for weights and scales and
/// linear space for frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SmKernelGrad<T: Scalar> {
    /// ∂k/∂(log w_q) — equals the q-th summand of the kernel.
    pub log_weights: Vec<T>,
    /// ∂k/∂μ_q
    pub frequencies: Vec<T>,
    /// ∂k/∂(log v_q)
    pub log_scales: Vec<T>,
}

/// Gradient of [`sm_kernel`] with respect to `(log w_q, μ_q, log v_q)`.
pub fn sm_kernel_grad<T: Scalar>(params: &SmKernelParams<T>, tau: T) -> SmKernelGrad<T> {
    let tau = tau.abs();
    let tau_sq = tau * tau;
    let pi_sq: T = real(std::f64::consts::PI * std::f64::consts::PI);
    let two_pi: T = real(2.0 * std::f64::consts::PI);
    let q_count = params.q();
    let mut grad = SmKernelGrad {
        log_weights: Vec::with_capacity(q_count),
        frequencies: Vec::with_capacity(q_count),
        log_scales: Vec::with_capacity(q_count),
    };
    for q in 0..q_count {
        let w = params.weights[q];
        let mu = params.frequencies[q];
        let v = params.scales[q];
        let decay = (-real::<T>(2.0) * pi_sq * tau_sq * v * v).exp();
        let angle = two_pi * tau * mu;
        let summand = w * decay * angle.cos();
        grad.log_weights.push(summand);
        grad.frequencies.push(-w * decay * angle.sin() * two_pi * tau);
        grad.log_scales
            .push(summand * (-real::<T>(4.0) * pi_sq * tau_sq * v * v));
    }
    grad
}

fn gaussian_pdf<T: Scalar>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    let norm = sd * real::<T>((2.0 * std::f64::consts::PI).sqrt());
    (-z * z / real::<T>(2.0)).exp() / norm
}

/// Symmetrized mixture-of-Gaussians spectral density
/// `S(s) = Σ_q w_q · ½[φ(s; μ_q, v_q) + φ(−s; μ_q, v_q)]`.
///
/// Even in `s`, nonnegative, and the Fourier dual of [`sm_kernel`].
pub fn spectral_density<T: Scalar>(params: &SmKernelParams<T>, s: T) -> T {
    let half: T = real(0.5);
    let mut acc = T::zero();
    for q in 0..params.q() {
        let mu = params.frequencies[q];
        let v = params.scales[q];
        acc += params.weights[q] * half * (gaussian_pdf(s, mu, v) + gaussian_pdf(-s, mu, v));
    }
    acc
}

/// Dense kernel matrix over `xs` with observation noise on the diagonal:
/// `M[i][j] = k(xs_i − xs_j) + σ_ε²·[i = j]`.
///
/// Each off-diagonal pair is evaluated once and mirrored, so the result is
/// exactly symmetric.
pub fn kernel_matrix<T: Scalar>(
    params: &SmKernelParams<T>,
    noise: NoiseParam<T>,
    xs: &[T],
) -> DMatrix<T> {
    let mut m = kernel_matrix_noise_free(params, xs);
    for i in 0..xs.len() {
        m[(i, i)] += noise.variance();
    }
    m
}

/// Kernel matrix without the noise diagonal (used by prior sampling).
pub fn kernel_matrix_noise_free<T: Scalar>(params: &SmKernelParams<T>, xs: &[T]) -> DMatrix<T> {
    let n = xs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let k = sm_kernel(params, xs[i] - xs[j]);
            m[(i, j)] = k;
            m[(j, i)] = k;
        }
    }
    m
}

/// Cross-covariance matrix `K[i][j] = k(rows_i − cols_j)` (no noise term).
pub fn cross_kernel_matrix<T: Scalar>(
    params: &SmKernelParams<T>,
    rows: &[T],
    cols: &[T],
) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        sm_kernel(params, rows[i] - cols[j])
    })
}

/// Radial basis function kernel `variance · exp(−τ²/(2ℓ²))`.
///
/// The Q=1, μ=0 spectral mixture kernel reduces to this with
/// `ℓ = 1/(2πv)`; it also serves as the Bayesian-optimization surrogate
/// kernel.
pub fn rbf_kernel<T: Scalar>(lengthscale: T, variance: T, tau: T) -> T {
    debug_assert!(lengthscale > T::zero() && variance > T::zero());
    let z = tau / lengthscale;
    variance * (-z * z / real::<T>(2.0)).exp()
}
