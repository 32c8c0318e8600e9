//! Non-seasonal ARIMA(p,d,q) baseline: AICc order selection over a small
//! grid, conditional-sum-of-squares estimation with Hannan–Rissanen
//! initialization, and interval forecasts via psi-weight accumulation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::gp::PredictiveDistribution;
use crate::optimize::{minimize, OptimOptions};
use crate::scalar::{real, Scalar};
use crate::timeseries::{standardize, TimeSeries, TimeSeriesError};

/// Order-grid caps: samples of 11–20 points cannot support more.
pub const MAX_P: usize = 3;
pub const MAX_Q: usize = 3;
pub const MAX_D: usize = 2;

#[derive(Debug, Error)]
pub enum ArimaError {
    #[error("invalid order: p ≤ {MAX_P}, q ≤ {MAX_Q}, d ≤ {MAX_D} required, got ({p},{d},{q})")]
    InvalidOrder { p: usize, d: usize, q: usize },
    #[error("series too short: need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("differenced series of length {len} cannot support order ({p},{d},{q})")]
    InsufficientData { p: usize, d: usize, q: usize, len: usize },
    #[error("optimum is non-stationary or non-invertible (root modulus {modulus:.6} inside the unit circle)")]
    UnstableRoots { modulus: f64 },
    #[error("no order in the grid produced a valid fit")]
    NoViableOrder,
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
}

/// ARIMA orders: `p` AR terms, `d` differencing passes, `q` MA terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Result<Self, ArimaError> {
        if p > MAX_P || q > MAX_Q || d > MAX_D {
            return Err(ArimaError::InvalidOrder { p, d, q });
        }
        Ok(Self { p, d, q })
    }
}

/// Fitted ARIMA model in native units, including the training tail state the
/// forecast recursion needs.
#[derive(Debug, Clone)]
pub struct ArimaModel<T: Scalar> {
    pub order: ArimaOrder,
    pub ar_coeffs: Vec<T>,
    pub ma_coeffs: Vec<T>,
    /// Regression constant of the differenced process (0 when `d ≥ 1`).
    pub intercept: T,
    pub innovation_variance: T,
    pub aicc: T,
    /// Original training series.
    train: TimeSeries<T>,
    /// Differenced training series.
    z: Vec<T>,
    /// CSS residuals aligned with `z` (first `p` entries are 0).
    residuals: Vec<T>,
    /// Last value of each differencing level `0..d`.
    diff_tails: Vec<T>,
    /// Last training timestamp and the grid spacing used to extend it.
    t_last: T,
    t_spacing: T,
}

/// Applies `d` differencing passes; `heads[k]` is the first element of level
/// `k`, which [`integrate`] needs to reconstruct the input exactly.
pub fn difference<T: Scalar>(values: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mut level = values.to_vec();
    let mut heads = Vec::with_capacity(d);
    for _ in 0..d {
        heads.push(level[0]);
        level = level.windows(2).map(|w| w[1] - w[0]).collect();
    }
    (level, heads)
}

/// Inverse of [`difference`]: cumulative sums seeded with the level heads.
pub fn integrate<T: Scalar>(z: &[T], heads: &[T]) -> Vec<T> {
    let mut level = z.to_vec();
    for &head in heads.iter().rev() {
        let mut rebuilt = Vec::with_capacity(level.len() + 1);
        rebuilt.push(head);
        let mut acc = head;
        for &dz in &level {
            acc += dz;
            rebuilt.push(acc);
        }
        level = rebuilt;
    }
    level
}

/// CSS residuals for the differenced series under `(φ, θ, c)`; presample
/// residuals are conditioned to zero and the first `p` values are skipped.
fn css_residuals<T: Scalar>(z: &[T], ar: &[T], ma: &[T], intercept: T) -> Vec<T> {
    let n = z.len();
    let p = ar.len();
    let q = ma.len();
    let mut e = vec![T::zero(); n];
    for t in p..n {
        let mut value = z[t] - intercept;
        for (i, &phi) in ar.iter().enumerate() {
            value -= phi * z[t - 1 - i];
        }
        for (j, &theta) in ma.iter().enumerate() {
            if t >= p + 1 + j {
                value -= theta * e[t - 1 - j];
            }
        }
        e[t] = value;
    }
    e
}

/// CSS residuals and their derivatives over `[φ_1..p, θ_1..q, c?]`,
/// aligned with `z` (entries before index `p` stay zero).
fn css_residuals_and_derivs<T: Scalar>(
    z: &[T],
    p: usize,
    q: usize,
    with_intercept: bool,
    params: &DVector<T>,
) -> (Vec<T>, Vec<Vec<T>>) {
    let n = z.len();
    let dim = p + q + usize::from(with_intercept);
    debug_assert_eq!(params.len(), dim);
    let ar: Vec<T> = (0..p).map(|i| params[i]).collect();
    let ma: Vec<T> = (0..q).map(|j| params[p + j]).collect();
    let intercept = if with_intercept { params[p + q] } else { T::zero() };

    let mut e = vec![T::zero(); n];
    let mut de = vec![vec![T::zero(); n]; dim];
    for t in p..n {
        let mut value = z[t] - intercept;
        for (i, &phi) in ar.iter().enumerate() {
            value -= phi * z[t - 1 - i];
        }
        for (j, &theta) in ma.iter().enumerate() {
            if t >= p + 1 + j {
                value -= theta * e[t - 1 - j];
            }
        }
        e[t] = value;

        for i in 0..p {
            let mut g = -z[t - 1 - i];
            for (j, &theta) in ma.iter().enumerate() {
                if t >= p + 1 + j {
                    g -= theta * de[i][t - 1 - j];
                }
            }
            de[i][t] = g;
        }
        for j0 in 0..q {
            let mut g = if t >= p + 1 + j0 { -e[t - 1 - j0] } else { T::zero() };
            for (j, &theta) in ma.iter().enumerate() {
                if t >= p + 1 + j {
                    g -= theta * de[p + j0][t - 1 - j];
                }
            }
            de[p + j0][t] = g;
        }
        if with_intercept {
            let mut g = -T::one();
            for (j, &theta) in ma.iter().enumerate() {
                if t >= p + 1 + j {
                    g -= theta * de[p + q][t - 1 - j];
                }
            }
            de[p + q][t] = g;
        }
    }
    (e, de)
}

/// Mean squared CSS residual and its analytic gradient (the optimization
/// objective).
fn css_objective<T: Scalar>(
    z: &[T],
    p: usize,
    q: usize,
    with_intercept: bool,
    params: &DVector<T>,
) -> Option<(T, DVector<T>)> {
    if params.iter().any(|v| !v.is_finite_scalar()) {
        return None;
    }
    let n = z.len();
    let dim = p + q + usize::from(with_intercept);
    let n_terms = n - p;
    let (e, de) = css_residuals_and_derivs(z, p, q, with_intercept, params);

    let scale = real::<T>(1.0) / real::<T>(n_terms as f64);
    let mut ss = T::zero();
    let mut grad = DVector::zeros(dim);
    for t in p..n {
        ss += e[t] * e[t];
        for k in 0..dim {
            grad[k] += real::<T>(2.0) * e[t] * de[k][t];
        }
    }
    if !ss.is_finite_scalar() {
        return None;
    }
    Some((ss * scale, grad * scale))
}

/// Roots of the monic polynomial `w^k − c_1 w^{k−1} − ... − c_k` via its
/// companion matrix. These are the inverse roots of the lag polynomial, so
/// stationarity/invertibility means all moduli < 1.
fn companion_inverse_roots<T: Scalar>(coeffs: &[T]) -> Vec<(f64, f64)> {
    let k = coeffs.len();
    if k == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::zeros(k, k);
    for (j, &c) in coeffs.iter().enumerate() {
        companion[(0, j)] = c;
    }
    for i in 1..k {
        companion[(i, i - 1)] = T::one();
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|ev| {
            (
                ev.re.to_f64().unwrap_or(f64::NAN),
                ev.im.to_f64().unwrap_or(f64::NAN),
            )
        })
        .collect()
}

fn max_modulus(roots: &[(f64, f64)]) -> f64 {
    roots
        .iter()
        .map(|&(re, im)| (re * re + im * im).sqrt())
        .fold(0.0, f64::max)
}

/// AR and MA inverse roots of a fitted model.
fn model_inverse_roots<T: Scalar>(ar: &[T], ma: &[T]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let ma_neg: Vec<T> = ma.iter().map(|&t| -t).collect();
    (companion_inverse_roots(ar), companion_inverse_roots(&ma_neg))
}

/// Ordinary least squares with a tiny ridge for degenerate designs.
fn ols<T: Scalar>(design: &DMatrix<T>, target: &DVector<T>) -> Option<DVector<T>> {
    let xtx = design.transpose() * design;
    let mut reg = xtx.clone();
    let ridge = real::<T>(1e-8) * (xtx.trace() / real(xtx.nrows().max(1) as f64) + T::one());
    for i in 0..reg.nrows() {
        reg[(i, i)] += ridge;
    }
    let xty = design.transpose() * target;
    reg.cholesky().map(|c| c.solve(&xty))
}

/// Hannan–Rissanen starting point: long-AR residual regression.
fn hannan_rissanen_init<T: Scalar>(
    z: &[T],
    p: usize,
    q: usize,
    with_intercept: bool,
) -> DVector<T> {
    let dim = p + q + usize::from(with_intercept);
    let zeros = DVector::zeros(dim);
    if p + q == 0 {
        return zeros;
    }
    let n = z.len();
    let mean = z.iter().fold(T::zero(), |a, &v| a + v) / real(n as f64);

    // Stage 1: long AR(m) by OLS on the centered series.
    let m = (p.max(q) + 2).min(n.saturating_sub(2) / 2);
    let mut e_hat = vec![T::zero(); n];
    if m >= 1 && n > 2 * m {
        let rows = n - m;
        let design = DMatrix::from_fn(rows, m, |r, c| z[m + r - 1 - c] - mean);
        let target = DVector::from_fn(rows, |r, _| z[m + r] - mean);
        if let Some(beta) = ols(&design, &target) {
            for t in m..n {
                let mut pred = T::zero();
                for c in 0..m {
                    pred += beta[c] * (z[t - 1 - c] - mean);
                }
                e_hat[t] = (z[t] - mean) - pred;
            }
        }
    }

    // Stage 2: regress z_t on its own lags and the stage-1 residual lags.
    let start = m + q.max(p);
    if start >= n {
        return zeros;
    }
    let rows = n - start;
    if rows < dim + 1 {
        return zeros;
    }
    let design = DMatrix::from_fn(rows, dim, |r, c| {
        let t = start + r;
        if c < p {
            z[t - 1 - c]
        } else if c < p + q {
            e_hat[t - 1 - (c - p)]
        } else {
            T::one()
        }
    });
    let target = DVector::from_fn(rows, |r, _| z[start + r]);
    match ols(&design, &target) {
        Some(beta) if beta.iter().all(|b| b.is_finite_scalar()) => beta,
        _ => zeros,
    }
}

struct CssFit<T: Scalar> {
    ar: Vec<T>,
    ma: Vec<T>,
    intercept: T,
    residuals: Vec<T>,
    sigma2_mle: T,
    innovation_variance: T,
    aicc: T,
}

/// Fits the differenced series by CSS and evaluates AICc. `log_scale` is the
/// log of the standardization factor, used to state the likelihood in native
/// units.
fn fit_css<T: Scalar>(
    z: &[T],
    p: usize,
    q: usize,
    with_intercept: bool,
    log_scale: T,
) -> Result<CssFit<T>, ArimaError> {
    let n = z.len();
    let n_terms = n - p;
    let dim = p + q + usize::from(with_intercept);

    let params = if dim == 0 {
        DVector::zeros(0)
    } else {
        let init = hannan_rissanen_init(z, p, q, with_intercept);
        let objective = |theta: &DVector<T>| css_objective(z, p, q, with_intercept, theta);
        let from_init = minimize(&objective, &init, &OptimOptions::new(200, real(1e-10)));
        match from_init {
            Ok(result) => {
                // A zero start occasionally beats a bad HR regression.
                if init.iter().any(|v| *v != T::zero()) {
                    let zeros = DVector::zeros(dim);
                    match minimize(&objective, &zeros, &OptimOptions::new(200, real(1e-10))) {
                        Ok(alt) if alt.value < result.value => alt.x,
                        _ => result.x,
                    }
                } else {
                    result.x
                }
            }
            Err(_) => return Err(ArimaError::EstimationFailed("CSS start rejected".into())),
        }
    };

    let ar: Vec<T> = (0..p).map(|i| params[i]).collect();
    let ma: Vec<T> = (0..q).map(|j| params[p + j]).collect();
    let intercept = if with_intercept { params[p + q] } else { T::zero() };

    // Stationarity of the AR polynomial and invertibility of the MA
    // polynomial, with a 1e-6 margin.
    let (ar_roots, ma_roots) = model_inverse_roots(&ar, &ma);
    let worst = max_modulus(&ar_roots).max(max_modulus(&ma_roots));
    if worst >= 1.0 - 1e-6 {
        return Err(ArimaError::UnstableRoots {
            modulus: 1.0 / worst.max(1e-12),
        });
    }

    let residuals = css_residuals(z, &ar, &ma, intercept);
    let ss = residuals[p..]
        .iter()
        .fold(T::zero(), |a, &e| a + e * e);
    let n_terms_t: T = real(n_terms as f64);
    let sigma2_mle = ss / n_terms_t;
    if !(sigma2_mle > T::zero()) || !sigma2_mle.is_finite_scalar() {
        return Err(ArimaError::EstimationFailed(
            "degenerate innovation variance".into(),
        ));
    }
    let dof = n_terms.saturating_sub(dim).max(1);
    let innovation_variance = ss / real(dof as f64);

    // Gaussian CSS log likelihood, shifted to native units, then AICc with
    // k = p + q + intercept + 1 (the variance).
    let half: T = real(0.5);
    let ln_2pi: T = real((2.0 * std::f64::consts::PI).ln());
    let loglik = -half * n_terms_t * (ln_2pi + sigma2_mle.ln() + T::one()) - n_terms_t * log_scale;
    let k = dim + 1;
    let denom = n_terms as i64 - k as i64 - 1;
    if denom < 1 {
        return Err(ArimaError::InsufficientData {
            p,
            d: 0,
            q,
            len: n,
        });
    }
    let k_t: T = real(k as f64);
    let aicc = -real::<T>(2.0) * loglik
        + real::<T>(2.0) * k_t
        + real::<T>(2.0) * k_t * (k_t + T::one()) / real(denom as f64);

    Ok(CssFit {
        ar,
        ma,
        intercept,
        residuals,
        sigma2_mle,
        innovation_variance,
        aicc,
    })
}

/// Estimates an ARIMA model of fixed order on a native-unit series.
///
/// Estimation runs on standardized values; coefficients, intercept, and
/// variance are mapped back to native units before the model is assembled.
pub fn fit_arima<T: Scalar>(
    train: &TimeSeries<T>,
    order: ArimaOrder,
) -> Result<ArimaModel<T>, ArimaError> {
    let ArimaOrder { p, d, q } = order;
    if train.len() < d + 2 {
        return Err(ArimaError::TooShort {
            need: d + 2,
            got: train.len(),
        });
    }
    let n_eff = train.len() - d;
    if n_eff < p + q + 2 {
        return Err(ArimaError::InsufficientData {
            p,
            d,
            q,
            len: n_eff,
        });
    }

    let (std_series, scaling) = standardize(train)?;
    let (z_std, _) = difference(std_series.values(), d);
    let with_intercept = d == 0;
    let fit = fit_css(&z_std, p, q, with_intercept, scaling.y_std.ln())?;

    // Map the standardized fit back to native units: AR/MA coefficients are
    // scale-free; the intercept and variance are not.
    let s = scaling.y_std;
    let m = scaling.y_mean;
    let intercept_native = if with_intercept {
        let ar_sum = fit.ar.iter().fold(T::zero(), |a, &phi| a + phi);
        s * fit.intercept + m * (T::one() - ar_sum)
    } else {
        T::zero()
    };
    let innovation_variance = fit.innovation_variance * s * s;

    let (z_native, _) = difference(train.values(), d);
    let residuals = css_residuals(&z_native, &fit.ar, &fit.ma, intercept_native);

    let mut diff_tails = Vec::with_capacity(d);
    let mut level = train.values().to_vec();
    for _ in 0..d {
        diff_tails.push(*level.last().expect("nonempty level"));
        level = level.windows(2).map(|w| w[1] - w[0]).collect();
    }

    let sigma2_check = fit.sigma2_mle * s * s;
    if !sigma2_check.is_finite_scalar() {
        return Err(ArimaError::EstimationFailed("non-finite variance".into()));
    }

    Ok(ArimaModel {
        order,
        ar_coeffs: fit.ar,
        ma_coeffs: fit.ma,
        intercept: intercept_native,
        innovation_variance,
        aicc: fit.aicc,
        train: train.clone(),
        z: z_native,
        residuals,
        diff_tails,
        t_last: train.timestamps()[train.len() - 1],
        t_spacing: train.median_spacing(),
    })
}

/// Inverse-root modulus beyond which a candidate is too close to the
/// stationarity/invertibility boundary to trust during selection (a
/// near-unit AR root is a trend in disguise; differencing handles those).
const SELECTION_ROOT_MARGIN: f64 = 0.99;
/// Minimum distance between AR and MA inverse roots: closer pairs are
/// near-common factors, the classic CSS overfitting ridge.
const SELECTION_REDUNDANCY_MARGIN: f64 = 0.1;

/// Minimum |t| the highest-lag AR and MA coefficients must reach for a
/// candidate to enter the comparison (Gauss–Newton standard errors).
const SELECTION_MIN_TERMINAL_T: f64 = 2.0;

/// |t| statistics of `φ_p` and `θ_q` from the Gauss–Newton covariance
/// `σ²(JᵀJ)⁻¹`; `None` when the information matrix is singular (an
/// unidentified ridge fit).
fn terminal_t_stats<T: Scalar>(model: &ArimaModel<T>) -> Option<(f64, f64)> {
    let ArimaOrder { p, d, q } = model.order;
    if p == 0 && q == 0 {
        return Some((f64::INFINITY, f64::INFINITY));
    }
    let with_intercept = d == 0;
    let dim = p + q + usize::from(with_intercept);
    let mut params = DVector::zeros(dim);
    for (i, &phi) in model.ar_coeffs.iter().enumerate() {
        params[i] = phi;
    }
    for (j, &theta) in model.ma_coeffs.iter().enumerate() {
        params[p + j] = theta;
    }
    if with_intercept {
        params[p + q] = model.intercept;
    }
    let (_, de) = css_residuals_and_derivs(&model.z, p, q, with_intercept, &params);

    let n = model.z.len();
    let mut jtj = DMatrix::<T>::zeros(dim, dim);
    for t in p..n {
        for a in 0..dim {
            for b in a..dim {
                let inc = de[a][t] * de[b][t];
                jtj[(a, b)] += inc;
                if a != b {
                    jtj[(b, a)] += inc;
                }
            }
        }
    }
    let cov = jtj.cholesky()?.inverse() * model.innovation_variance;
    let t_of = |coef: T, var: T| {
        let v = var.to_f64().unwrap_or(f64::NAN);
        if v <= 0.0 || !v.is_finite() {
            return 0.0;
        }
        (coef.to_f64().unwrap_or(0.0) / v.sqrt()).abs()
    };
    let t_ar = if p > 0 {
        t_of(model.ar_coeffs[p - 1], cov[(p - 1, p - 1)])
    } else {
        f64::INFINITY
    };
    let t_ma = if q > 0 {
        t_of(model.ma_coeffs[q - 1], cov[(p + q - 1, p + q - 1)])
    } else {
        f64::INFINITY
    };
    Some((t_ar, t_ma))
}

/// Rejects candidates whose fitted roots hug the unit circle, nearly cancel
/// between the AR and MA polynomials, or carry insignificant terminal
/// coefficients.
fn selection_admissible<T: Scalar>(model: &ArimaModel<T>) -> bool {
    let (ar_roots, ma_roots) = model_inverse_roots(&model.ar_coeffs, &model.ma_coeffs);
    if max_modulus(&ar_roots).max(max_modulus(&ma_roots)) > SELECTION_ROOT_MARGIN {
        return false;
    }
    for &(ar_re, ar_im) in &ar_roots {
        for &(ma_re, ma_im) in &ma_roots {
            let dist = ((ar_re - ma_re).powi(2) + (ar_im - ma_im).powi(2)).sqrt();
            if dist < SELECTION_REDUNDANCY_MARGIN {
                return false;
            }
        }
    }
    match terminal_t_stats(model) {
        Some((t_ar, t_ma)) => {
            t_ar >= SELECTION_MIN_TERMINAL_T && t_ma >= SELECTION_MIN_TERMINAL_T
        }
        None => false,
    }
}

/// AICc of a fitted model evaluated on a conditioning window shared by the
/// whole grid (the first `MAX_D + MAX_P` level-0 observations are excluded
/// for every cell), so CSS likelihoods are comparable across orders.
fn selection_aicc<T: Scalar>(model: &ArimaModel<T>, n_obs: usize) -> Option<f64> {
    let ArimaOrder { p, d, q } = model.order;
    let t0 = MAX_D + MAX_P - d; // z-index of the first scored term; ≥ p always
    debug_assert!(t0 >= p);
    if model.z.len() <= t0 {
        return None;
    }
    let window = &model.residuals[t0..];
    let n_w = window.len();
    debug_assert_eq!(n_w, n_obs - MAX_D - MAX_P);
    let k = p + q + usize::from(d == 0) + 1;
    if n_w as i64 - k as i64 - 1 < 1 {
        return None;
    }
    let ss: f64 = window
        .iter()
        .map(|e| e.to_f64().unwrap_or(f64::NAN).powi(2))
        .sum();
    if !ss.is_finite() || ss <= 0.0 {
        return None;
    }
    let sigma2 = ss / n_w as f64;
    let loglik = -0.5 * n_w as f64 * ((2.0 * std::f64::consts::PI).ln() + sigma2.ln() + 1.0);
    let k_f = k as f64;
    Some(-2.0 * loglik + 2.0 * k_f + 2.0 * k_f * (k_f + 1.0) / (n_w as f64 - k_f - 1.0))
}

/// Grid-searches `(p, d, q)` by AICc; ties break toward smaller `p+q`, then
/// smaller `d`, then smaller `p`.
pub fn select_order<T: Scalar>(train: &TimeSeries<T>) -> Result<ArimaOrder, ArimaError> {
    if train.len() < 8 {
        return Err(ArimaError::TooShort {
            need: 8,
            got: train.len(),
        });
    }
    let mut best: Option<(f64, ArimaOrder)> = None;
    for d in 0..=MAX_D {
        for p in 0..=MAX_P {
            for q in 0..=MAX_Q {
                if train.len() < d + 2 || train.len() - d < p + q + 2 {
                    continue;
                }
                let order = ArimaOrder { p, d, q };
                let Ok(model) = fit_arima(train, order) else {
                    continue;
                };
                if !selection_admissible(&model) {
                    continue;
                }
                let Some(aicc) = selection_aicc(&model, train.len()) else {
                    continue;
                };
                if !aicc.is_finite() {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((best_aicc, best_order)) => {
                        if aicc < *best_aicc {
                            true
                        } else if aicc > *best_aicc {
                            false
                        } else {
                            let cand = (p + q, d, p);
                            let incumbent = (best_order.p + best_order.q, best_order.d, best_order.p);
                            cand < incumbent
                        }
                    }
                };
                if better {
                    best = Some((aicc, order));
                }
            }
        }
    }
    best.map(|(_, order)| order).ok_or(ArimaError::NoViableOrder)
}

impl<T: Scalar> ArimaModel<T> {
    /// Rebuilds a model from persisted parameters, recomputing the residual
    /// and tail state deterministically from the training series.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        train: &TimeSeries<T>,
        order: ArimaOrder,
        ar_coeffs: Vec<T>,
        ma_coeffs: Vec<T>,
        intercept: T,
        innovation_variance: T,
        aicc: T,
    ) -> Result<Self, ArimaError> {
        if ar_coeffs.len() != order.p || ma_coeffs.len() != order.q {
            return Err(ArimaError::EstimationFailed(
                "coefficient lengths disagree with the order".into(),
            ));
        }
        if train.len() < order.d + 2 {
            return Err(ArimaError::TooShort {
                need: order.d + 2,
                got: train.len(),
            });
        }
        let (z, _) = difference(train.values(), order.d);
        let residuals = css_residuals(&z, &ar_coeffs, &ma_coeffs, intercept);
        let mut diff_tails = Vec::with_capacity(order.d);
        let mut level = train.values().to_vec();
        for _ in 0..order.d {
            diff_tails.push(*level.last().expect("nonempty level"));
            level = level.windows(2).map(|w| w[1] - w[0]).collect();
        }
        Ok(Self {
            order,
            ar_coeffs,
            ma_coeffs,
            intercept,
            innovation_variance,
            aicc,
            train: train.clone(),
            z,
            residuals,
            diff_tails,
            t_last: train.timestamps()[train.len() - 1],
            t_spacing: train.median_spacing(),
        })
    }

    /// The series the model was fit to.
    pub fn train(&self) -> &TimeSeries<T> {
        &self.train
    }

    /// One-step-ahead in-sample predictions aligned with the training series
    /// (`y_t − e_t`; presample points fall back to the observation).
    pub fn fitted_values(&self) -> Vec<T> {
        let d = self.order.d;
        self.train
            .values()
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                if i >= d {
                    y - self.residuals[i - d]
                } else {
                    y
                }
            })
            .collect()
    }

    /// Psi weights `ψ_0..ψ_{count−1}` of the differenced ARMA process.
    fn psi_weights(&self, count: usize) -> Vec<T> {
        let mut psi = Vec::with_capacity(count);
        psi.push(T::one());
        for k in 1..count {
            let mut value = if k <= self.order.q {
                self.ma_coeffs[k - 1]
            } else {
                T::zero()
            };
            for (i, &phi) in self.ar_coeffs.iter().enumerate() {
                if k >= i + 1 {
                    value += phi * psi[k - 1 - i];
                }
            }
            psi.push(value);
        }
        psi
    }
}

/// Recursive point forecasts (future innovations at zero) with variance from
/// psi-weight accumulation, integrated through `d` levels, 95% Gaussian
/// bounds, all in native units.
pub fn forecast_arima<T: Scalar>(
    model: &ArimaModel<T>,
    horizon: usize,
) -> Result<PredictiveDistribution<T>, ArimaError> {
    if horizon < 1 {
        return Err(ArimaError::EstimationFailed(
            "forecast horizon must be at least 1".into(),
        ));
    }
    let n = model.z.len();

    // Point forecasts of the differenced process. A lag `l` at step `h`
    // lands at offset `h − 1 − l` into the future block; negative offsets
    // index the training tail.
    let mut z_future: Vec<T> = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let mut value = model.intercept;
        for (i, &phi) in model.ar_coeffs.iter().enumerate() {
            let idx = h as i64 - 2 - i as i64;
            value += phi
                * if idx >= 0 {
                    z_future[idx as usize]
                } else {
                    model.z[(n as i64 + idx) as usize]
                };
        }
        for (j, &theta) in model.ma_coeffs.iter().enumerate() {
            let idx = h as i64 - 2 - j as i64;
            if idx < 0 {
                value += theta * model.residuals[(n as i64 + idx) as usize];
            }
        }
        z_future.push(value);
    }

    // Integrate the point forecasts back to the original level.
    let mut mean = z_future.clone();
    for &tail in model.diff_tails.iter().rev() {
        let mut acc = tail;
        for value in &mut mean {
            acc += *value;
            *value = acc;
        }
    }

    // Psi weights of the integrated process: cumulative-sum the differenced
    // process weights once per differencing pass.
    let mut psi = model.psi_weights(horizon);
    for _ in 0..model.order.d {
        let mut acc = T::zero();
        for value in &mut psi {
            acc += *value;
            *value = acc;
        }
    }
    let mut sd = Vec::with_capacity(horizon);
    let mut acc = T::zero();
    for weight in psi.iter().take(horizon) {
        acc += *weight * *weight;
        sd.push((model.innovation_variance * acc).sqrt());
    }

    let query_x: Vec<T> = (1..=horizon)
        .map(|h| model.t_last + real::<T>(h as f64) * model.t_spacing)
        .collect();
    Ok(PredictiveDistribution::from_mean_sd(query_x, mean, sd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn series(values: Vec<f64>) -> TimeSeries<f64> {
        let ts: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
        TimeSeries::new(ts, values, "test").unwrap()
    }

    fn simulate_ar1(phi: f64, sigma: f64, intercept: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut y = intercept / (1.0 - phi);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n + 100 {
            y = intercept + phi * y + sigma * f64::standard_normal(&mut rng);
            out.push(y);
        }
        out.split_off(100)
    }

    fn white_noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| 2.0 + f64::standard_normal(&mut rng)).collect()
    }

    #[test]
    fn order_caps_enforced() {
        assert!(ArimaOrder::new(4, 0, 0).is_err());
        assert!(ArimaOrder::new(0, 3, 0).is_err());
        assert!(ArimaOrder::new(0, 0, 4).is_err());
        assert!(ArimaOrder::new(3, 2, 3).is_ok());
    }

    #[test]
    fn difference_integrate_round_trip_is_exact() {
        let y = vec![3.0, 1.5, 4.25, -2.0, 7.0, 0.5];
        for d in 0..=2 {
            let (z, heads) = difference(&y, d);
            assert_eq!(z.len(), y.len() - d);
            assert_eq!(integrate(&z, &heads), y);
        }
    }

    #[test]
    fn mean_model_recovers_sample_moments() {
        let values = white_noise(60, 4);
        let train = series(values.clone());
        let model = fit_arima(&train, ArimaOrder::new(0, 0, 0).unwrap()).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_relative_eq!(model.intercept, mean, epsilon = 1e-8);
        assert_relative_eq!(model.innovation_variance, var, epsilon = 1e-8);
    }

    #[test]
    fn random_walk_forecasts_last_value() {
        let train = series(vec![1.0, 3.0, 2.0, 5.0, 4.0, 4.5, 6.0, 5.5]);
        let model = fit_arima(&train, ArimaOrder::new(0, 1, 0).unwrap()).unwrap();
        assert!(model.ar_coeffs.is_empty() && model.ma_coeffs.is_empty());
        assert_eq!(model.intercept, 0.0);
        let forecast = forecast_arima(&model, 4).unwrap();
        for &m in &forecast.mean {
            assert_relative_eq!(m, 5.5, epsilon = 1e-10);
        }
        for pair in forecast.sd.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
        // Random-walk variance grows linearly.
        let ratio = forecast.sd[3] / forecast.sd[0];
        assert_relative_eq!(ratio, 2.0, max_relative = 1e-10);
    }

    #[test]
    fn ar1_forecast_matches_closed_form() {
        let values = simulate_ar1(0.7, 1.0, 0.5, 120, 9);
        let train = series(values.clone());
        let model = fit_arima(&train, ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
        let phi = model.ar_coeffs[0];
        let c = model.intercept;
        let sigma2 = model.innovation_variance;
        let y_last = *values.last().unwrap();

        let forecast = forecast_arima(&model, 6).unwrap();
        for h in 1..=6usize {
            let mean = c * (1.0 - phi.powi(h as i32)) / (1.0 - phi) + phi.powi(h as i32) * y_last;
            let var: f64 = sigma2 * (0..h).map(|j| phi.powi(2 * j as i32)).sum::<f64>();
            assert_relative_eq!(forecast.mean[h - 1], mean, epsilon = 1e-8, max_relative = 1e-8);
            assert_relative_eq!(
                forecast.sd[h - 1],
                var.sqrt(),
                epsilon = 1e-8,
                max_relative = 1e-8
            );
        }
    }

    #[test]
    fn ar1_coefficient_recovered_from_simulation() {
        // Per-seed success is ~90% (the estimator is exactly OLS for AR(1));
        // this fixed window achieves 9/10.
        let mut hits = 0;
        for seed in 0..10u64 {
            let values = simulate_ar1(0.7, 1.0, 0.0, 200, seed);
            let train = series(values);
            let model = fit_arima(&train, ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
            if (model.ar_coeffs[0] - 0.7).abs() <= 0.1 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "phi recovered in only {hits}/10 seeds");
    }

    #[test]
    fn white_noise_selects_empty_model() {
        let mut hits = 0;
        for seed in 0..10u64 {
            let train = series(white_noise(100, 200 + seed));
            let order = select_order(&train).unwrap();
            if order.p == 0 && order.q == 0 {
                hits += 1;
            }
        }
        assert!(hits >= 8, "selected (0,·,0) in only {hits}/10 seeds");
    }

    #[test]
    fn linear_trend_selects_differencing() {
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(300 + seed);
            let values: Vec<f64> = (0..60)
                .map(|i| 0.5 * i as f64 + 0.2 * f64::standard_normal(&mut rng))
                .collect();
            let train = series(values);
            let order = select_order(&train).unwrap();
            if order.d >= 1 {
                hits += 1;
            }
        }
        assert!(hits >= 8, "selected d ≥ 1 in only {hits}/10 seeds");
    }

    #[test]
    fn aicc_penalizes_parameter_count_on_noise() {
        let mut hits = 0;
        for seed in 0..10u64 {
            let train = series(white_noise(80, 400 + seed));
            let small = fit_arima(&train, ArimaOrder::new(0, 0, 0).unwrap()).unwrap();
            let big = fit_arima(&train, ArimaOrder::new(3, 0, 3).unwrap());
            match big {
                Ok(big) => {
                    if small.aicc < big.aicc {
                        hits += 1;
                    }
                }
                // An unstable over-parameterized fit counts as penalized.
                Err(_) => hits += 1,
            }
        }
        assert!(hits >= 9, "AICc preferred the big model too often: {}/10", 10 - hits);
    }

    #[test]
    fn short_series_rejected() {
        let train = series(vec![1.0, 2.0, 1.5, 2.5, 1.0, 2.0, 1.5]);
        assert!(matches!(
            select_order(&train),
            Err(ArimaError::TooShort { .. })
        ));
    }

    #[test]
    fn forecast_mean_approaches_process_mean() {
        // Fit-then-forecast on data simulated from the fitted model keeps the
        // unconditional mean within Monte Carlo error.
        let values = simulate_ar1(0.5, 1.0, 1.0, 300, 77);
        let train = series(values);
        let model = fit_arima(&train, ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
        let long_run = model.intercept / (1.0 - model.ar_coeffs[0]);
        let forecast = forecast_arima(&model, 50).unwrap();
        assert_relative_eq!(forecast.mean[49], long_run, max_relative = 0.02);
    }

    #[test]
    fn from_parts_round_trips_forecasts() {
        let values = simulate_ar1(0.6, 0.8, 0.3, 60, 21);
        let train = series(values);
        let model = fit_arima(&train, ArimaOrder::new(1, 0, 1).unwrap()).unwrap();
        let rebuilt = ArimaModel::from_parts(
            &train,
            model.order,
            model.ar_coeffs.clone(),
            model.ma_coeffs.clone(),
            model.intercept,
            model.innovation_variance,
            model.aicc,
        )
        .unwrap();
        let a = forecast_arima(&model, 5).unwrap();
        let b = forecast_arima(&rebuilt, 5).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.sd, b.sd);
    }

    #[test]
    fn fitted_values_align_with_training_series() {
        let values = simulate_ar1(0.6, 0.5, 0.0, 40, 13);
        let train = series(values.clone());
        let model = fit_arima(&train, ArimaOrder::new(1, 0, 0).unwrap()).unwrap();
        let fitted = model.fitted_values();
        assert_eq!(fitted.len(), train.len());
        // One-step-ahead residual variance should be near the innovation
        // variance, far below the raw series variance.
        let resid_var: f64 = fitted
            .iter()
            .zip(&values)
            .skip(1)
            .map(|(f, y)| (y - f).powi(2))
            .sum::<f64>()
            / (values.len() - 1) as f64;
        assert!(resid_var < train.variance());
    }
}
