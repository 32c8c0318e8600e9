//! Exact Gaussian-process regression with the spectral mixture kernel.
//!
//! The model keeps a zero prior mean on standardized data; standardization
//! happens inside [`GpModel::build`] and is inverted at prediction time, so
//! callers see native units throughout. Factorization uses an escalating
//! jitter ladder and records the jitter that succeeded.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::kernels::{
    cross_kernel_matrix, kernel_matrix, kernel_matrix_noise_free, sm_kernel_grad, KernelError,
    NoiseParam, SmKernelParams,
};
use crate::scalar::{real, Scalar};
use crate::timeseries::{standardize, ScalingParams, TimeSeries, TimeSeriesError};

/// Jitter ladder, as multiples of the mean diagonal.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

#[derive(Debug, Error)]
pub enum GpError {
    #[error(
        "covariance matrix is not positive definite even with jitter ladder {JITTER_LADDER:?} \
         (× mean diagonal {mean_diag:.3e})"
    )]
    NotPositiveDefinite { mean_diag: f64 },
    #[error("need at least {need} training points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
}

/// Whether predictive intervals describe the latent function or a future
/// observation (latent variance plus `σ_ε²`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalMode {
    Latent,
    Observation,
}

/// Per-query posterior predictive summary in native units.
///
/// `lo95`/`hi95` are the Gaussian central interval `mean ∓ 1.96·sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution<T: Scalar> {
    pub query_x: Vec<T>,
    pub mean: Vec<T>,
    pub sd: Vec<T>,
    pub lo95: Vec<T>,
    pub hi95: Vec<T>,
}

impl<T: Scalar> PredictiveDistribution<T> {
    pub fn from_mean_sd(query_x: Vec<T>, mean: Vec<T>, sd: Vec<T>) -> Self {
        let z: T = real(1.96);
        let lo95 = mean
            .iter()
            .zip(&sd)
            .map(|(&m, &s)| m - z * s)
            .collect();
        let hi95 = mean
            .iter()
            .zip(&sd)
            .map(|(&m, &s)| m + z * s)
            .collect();
        Self {
            query_x,
            mean,
            sd,
            lo95,
            hi95,
        }
    }

    pub fn len(&self) -> usize {
        self.query_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_x.is_empty()
    }
}

/// Fitted exact-GP state: standardized training data, hyperparameters, the
/// Cholesky factor of `K + σ_ε²I (+ jitter·I)`, and the weight vector
/// `α = (K + σ_ε²I)⁻¹ y`.
pub struct GpModel<T: Scalar> {
    train_t: Vec<T>,
    train_y: Vec<T>,
    x_std: Vec<T>,
    y_std: DVector<T>,
    params: SmKernelParams<T>,
    noise: NoiseParam<T>,
    scaling: ScalingParams<T>,
    chol: Cholesky<T, Dyn>,
    alpha: DVector<T>,
    jitter_used: T,
}

impl<T: Scalar> std::fmt::Debug for GpModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GpModel")
            .field("n_train", &self.x_std.len())
            .field("params", &self.params)
            .field("noise", &self.noise)
            .field("scaling", &self.scaling)
            .field("jitter_used", &self.jitter_used)
            .finish_non_exhaustive()
    }
}

/// Factorizes `k` with the escalating jitter ladder; returns the factor and
/// the absolute jitter that succeeded.
pub(crate) fn cholesky_with_jitter<T: Scalar>(
    k: &DMatrix<T>,
) -> Result<(Cholesky<T, Dyn>, T), GpError> {
    let n = k.nrows();
    let mean_diag = k.diagonal().sum() / real(n as f64);
    for factor in JITTER_LADDER {
        let jitter = real::<T>(factor) * mean_diag;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            return Ok((chol, jitter));
        }
    }
    Err(GpError::NotPositiveDefinite {
        mean_diag: mean_diag.to_f64().unwrap_or(f64::NAN),
    })
}

impl<T: Scalar> GpModel<T> {
    /// Builds a model from a native-unit series; standardization is applied
    /// internally and recorded in the model.
    pub fn build(
        train: &TimeSeries<T>,
        params: SmKernelParams<T>,
        noise: NoiseParam<T>,
    ) -> Result<Self, GpError> {
        if train.len() < 2 {
            return Err(GpError::TooFewPoints {
                need: 2,
                got: train.len(),
            });
        }
        let (std_series, scaling) = standardize(train)?;
        Self::assemble(
            train.timestamps().to_vec(),
            train.values().to_vec(),
            std_series.timestamps().to_vec(),
            std_series.values().to_vec(),
            params,
            noise,
            scaling,
        )
    }

    /// Builds a model directly from standardized data and the transform that
    /// produced it. Inputs need not be sorted.
    pub fn from_standardized(
        x_std: Vec<T>,
        y_std: Vec<T>,
        params: SmKernelParams<T>,
        noise: NoiseParam<T>,
        scaling: ScalingParams<T>,
    ) -> Result<Self, GpError> {
        if x_std.is_empty() || x_std.len() != y_std.len() {
            return Err(GpError::TooFewPoints {
                need: 1,
                got: x_std.len().min(y_std.len()),
            });
        }
        let train_t = x_std.iter().map(|&x| scaling.to_native_x(x)).collect();
        let train_y = y_std.iter().map(|&y| scaling.to_native_y(y)).collect();
        Self::assemble(train_t, train_y, x_std, y_std, params, noise, scaling)
    }

    fn assemble(
        train_t: Vec<T>,
        train_y: Vec<T>,
        x_std: Vec<T>,
        y_std: Vec<T>,
        params: SmKernelParams<T>,
        noise: NoiseParam<T>,
        scaling: ScalingParams<T>,
    ) -> Result<Self, GpError> {
        let k = kernel_matrix(&params, noise, &x_std);
        let (chol, jitter_used) = cholesky_with_jitter(&k)?;
        let y_vec = DVector::from_vec(y_std.clone());
        let alpha = chol.solve(&y_vec);
        Ok(Self {
            train_t,
            train_y,
            x_std,
            y_std: y_vec,
            params,
            noise,
            scaling,
            chol,
            alpha,
            jitter_used,
        })
    }

    pub fn train_len(&self) -> usize {
        self.x_std.len()
    }

    /// Native-unit training timestamps.
    pub fn train_t(&self) -> &[T] {
        &self.train_t
    }

    /// Native-unit training values.
    pub fn train_y(&self) -> &[T] {
        &self.train_y
    }

    pub fn params(&self) -> &SmKernelParams<T> {
        &self.params
    }

    pub fn noise(&self) -> NoiseParam<T> {
        self.noise
    }

    pub fn scaling(&self) -> &ScalingParams<T> {
        &self.scaling
    }

    pub fn jitter_used(&self) -> T {
        self.jitter_used
    }

    /// Lower-triangular Cholesky factor of `K + σ_ε²I + jitter·I`.
    pub fn chol_l(&self) -> DMatrix<T> {
        self.chol.l()
    }

    pub fn alpha(&self) -> &DVector<T> {
        &self.alpha
    }

    /// Log marginal likelihood of the standardized training data and its
    /// gradient over `[log w_1..Q, μ_1..Q, log v_1..Q, log σ_ε²]`.
    pub fn log_marginal_likelihood(&self) -> (T, DVector<T>) {
        let n = self.x_std.len();
        let q = self.params.q();
        let half: T = real(0.5);

        let quad = self.y_std.dot(&self.alpha);
        let log_det_half = self
            .chol
            .l()
            .diagonal()
            .iter()
            .fold(T::zero(), |acc, &d| acc + d.ln());
        let constant = real::<T>(n as f64) * real::<T>((2.0 * std::f64::consts::PI).ln());
        let value = -half * quad - log_det_half - half * constant;

        // d lml / dθ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ), accumulated over pairs.
        let k_inv = self.chol.inverse();
        let mut grad = DVector::zeros(3 * q + 1);
        let two: T = real(2.0);
        for i in 0..n {
            for j in i..n {
                let weight = if i == j { half } else { half * two };
                let a_ij = self.alpha[i] * self.alpha[j] - k_inv[(i, j)];
                let g = sm_kernel_grad(&self.params, self.x_std[i] - self.x_std[j]);
                for comp in 0..q {
                    grad[comp] += weight * a_ij * g.log_weights[comp];
                    grad[q + comp] += weight * a_ij * g.frequencies[comp];
                    grad[2 * q + comp] += weight * a_ij * g.log_scales[comp];
                }
            }
            let a_ii = self.alpha[i] * self.alpha[i] - k_inv[(i, i)];
            grad[3 * q] += half * self.noise.variance() * a_ii;
        }
        (value, grad)
    }

    /// Posterior predictive at native-unit query points with latent-function
    /// variance (the library default).
    pub fn predict(&self, query_x: &[T]) -> Result<PredictiveDistribution<T>, GpError> {
        self.predict_mode(query_x, IntervalMode::Latent)
    }

    /// Posterior predictive; `Observation` mode adds `σ_ε²` to the variance.
    pub fn predict_mode(
        &self,
        query_x: &[T],
        mode: IntervalMode,
    ) -> Result<PredictiveDistribution<T>, GpError> {
        if query_x.iter().any(|x| !x.is_finite_scalar()) {
            return Err(GpError::NumericalFailure(
                "non-finite query point".into(),
            ));
        }
        let query_std: Vec<T> = query_x
            .iter()
            .map(|&x| self.scaling.to_standard_x(x))
            .collect();

        let k_star = cross_kernel_matrix(&self.params, &self.x_std, &query_std);
        let mean_std = k_star.transpose() * &self.alpha;

        let v = self
            .chol
            .l()
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| {
                GpError::NumericalFailure("triangular solve failed in predict".into())
            })?;

        let k0 = self.params.total_weight();
        let clamp_floor = -real::<T>(1e-10) * k0;
        let mut sd_native = Vec::with_capacity(query_x.len());
        let mut mean_native = Vec::with_capacity(query_x.len());
        for (j, &m_std) in mean_std.iter().enumerate() {
            let mut var = k0 - v.column(j).norm_squared();
            if var < T::zero() {
                if var < clamp_floor {
                    return Err(GpError::NumericalFailure(format!(
                        "predictive variance {:?} below tolerance {:?} at query index {j}",
                        var, clamp_floor
                    )));
                }
                log::warn!(
                    "clamping slightly negative predictive variance {:?} to 0 at query index {j}",
                    var
                );
                var = T::zero();
            }
            if mode == IntervalMode::Observation {
                var += self.noise.variance();
            }
            mean_native.push(self.scaling.to_native_y(m_std));
            sd_native.push(self.scaling.to_native_sd(var.sqrt()));
        }

        Ok(PredictiveDistribution::from_mean_sd(
            query_x.to_vec(),
            mean_native,
            sd_native,
        ))
    }
}

/// Draws one realization `y = L·z + σ_ε·ε` of the GP prior (plus observation
/// noise) at `xs`, deterministically from `seed`.
pub fn sample_prior<T: Scalar>(
    params: &SmKernelParams<T>,
    noise: NoiseParam<T>,
    xs: &[T],
    seed: u64,
) -> Result<Vec<T>, GpError> {
    let k = kernel_matrix_noise_free(params, xs);
    let (chol, _) = cholesky_with_jitter(&k)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n = xs.len();
    let z = DVector::from_fn(n, |_, _| T::standard_normal(&mut rng));
    let f = chol.l() * z;
    let sigma = noise.variance().sqrt();
    Ok((0..n)
        .map(|i| f[i] + sigma * T::standard_normal(&mut rng))
        .collect())
}
