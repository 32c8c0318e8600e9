//! Expected-improvement Bayesian optimization of the spectral-mixture
//! frequencies and scales ("GP-SM Optimized").
//!
//! The tuned space is the 2Q vector `[μ_1..Q, log v_1..Q]`; weights and noise
//! are profiled out by a short inner MAP at every candidate. The surrogate is
//! an exact GP with an RBF kernel on box-normalized inputs, refit by MAP each
//! iteration. Acquisition is maximized over a seeded random cloud plus local
//! polish around the best few points.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::gp::{cholesky_with_jitter, GpError, GpModel};
use crate::inference::{HyperPrior, InferenceError, UnconstrainedPosterior};
use crate::kernels::{rbf_kernel, KernelError, NoiseParam, SmKernelParams};
use crate::optimize::{minimize, OptimOptions};
use crate::scalar::{real, sub_seed, Scalar};
use crate::timeseries::TimeSeries;

#[derive(Debug, Error)]
pub enum BayesOptError {
    #[error("invalid tuning configuration: {0}")]
    InvalidConfig(String),
    #[error("every candidate failed factorization; nothing to tune")]
    AllCandidatesFailed,
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Tuning budget and initial-design size; the search box is derived from the
/// training series unless overridden.
#[derive(Debug, Clone)]
pub struct TuneConfig<T: Scalar> {
    /// Total objective evaluations, initial design included.
    pub budget: usize,
    /// Quasi-random points evaluated before the surrogate takes over.
    pub n_init: usize,
    /// Per-dimension `(lower, upper)` bounds; `None` uses
    /// `μ_q ∈ [0, f_Nyq]`, `log v_q ∈ [log(0.1/x_range), log(10·f_Nyq)]`.
    pub bounds: Option<Vec<(T, T)>>,
    pub seed: u64,
}

impl<T: Scalar> Default for TuneConfig<T> {
    fn default() -> Self {
        Self {
            budget: 30,
            n_init: 8,
            bounds: None,
            seed: 0,
        }
    }
}

impl<T: Scalar> TuneConfig<T> {
    fn validate(&self) -> Result<(), BayesOptError> {
        if self.n_init < 2 || self.budget < self.n_init {
            return Err(BayesOptError::InvalidConfig(format!(
                "need budget ≥ n_init ≥ 2, got budget {} and n_init {}",
                self.budget, self.n_init
            )));
        }
        if let Some(bounds) = &self.bounds {
            for &(lo, hi) in bounds {
                if !lo.is_finite_scalar() || !hi.is_finite_scalar() || lo >= hi {
                    return Err(BayesOptError::InvalidConfig(
                        "bounds must be finite with lower < upper".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One objective evaluation: the candidate in constrained space
/// (`μ_1..Q, v_1..Q` for kernel tuning), its value, and the running best.
#[derive(Debug, Clone)]
pub struct TuneIteration<T: Scalar> {
    pub candidate: Vec<T>,
    pub objective: T,
    pub best_so_far: T,
}

/// Iteration history plus the winning hyperparameters.
#[derive(Debug, Clone)]
pub struct TuneTrace<T: Scalar> {
    pub iterations: Vec<TuneIteration<T>>,
    pub best_params: SmKernelParams<T>,
    pub best_noise: NoiseParam<T>,
    /// Full-refit penalized objective of the returned model.
    pub best_objective: T,
}

fn standard_normal_cdf<T: Scalar>(z: T) -> T {
    let z64 = z.to_f64().expect("finite z-score");
    real(0.5 * erfc(-z64 / std::f64::consts::SQRT_2))
}

fn standard_normal_pdf<T: Scalar>(z: T) -> T {
    let norm: T = real(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    norm * (-z * z / real::<T>(2.0)).exp()
}

/// Expected improvement of a Gaussian belief `N(mean, sd²)` over `best`
/// (maximization). At `sd = 0` this degenerates to `max(mean − best, 0)`.
pub fn expected_improvement<T: Scalar>(mean: T, sd: T, best: T) -> T {
    debug_assert!(sd >= T::zero());
    let gap = mean - best;
    if sd <= T::zero() {
        return gap.max(T::zero());
    }
    let z = gap / sd;
    (gap * standard_normal_cdf(z) + sd * standard_normal_pdf(z)).max(T::zero())
}

/// Scrambled Halton sequence in the unit cube: radical-inverse digits are
/// permuted per dimension with a seeded shuffle.
fn scrambled_halton<T: Scalar>(n: usize, dim: usize, seed: u64) -> Vec<Vec<T>> {
    const PRIMES: [usize; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83,
        89,
    ];
    assert!(dim <= PRIMES.len(), "search space dimension too large");
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(dim);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for &base in PRIMES.iter().take(dim) {
        let mut digits: Vec<usize> = (0..base).collect();
        // Fisher–Yates, keeping 0 fixed so 0 maps to 0.
        for i in (2..base).rev() {
            let j = rng.random_range(1..=i);
            digits.swap(i, j);
        }
        perms.push(digits);
    }
    (1..=n)
        .map(|index| {
            (0..dim)
                .map(|d| {
                    let base = PRIMES[d];
                    let perm = &perms[d];
                    let mut i = index;
                    let mut factor = 1.0 / base as f64;
                    let mut value = 0.0;
                    while i > 0 {
                        value += perm[i % base] as f64 * factor;
                        i /= base;
                        factor /= base as f64;
                    }
                    real(value)
                })
                .collect()
        })
        .collect()
}

/// Exact-GP surrogate with an isotropic RBF kernel on `[0,1]^D` inputs.
struct Surrogate<T: Scalar> {
    points: Vec<Vec<T>>,
    alpha: DVector<T>,
    chol_l: DMatrix<T>,
    lengthscale: T,
    variance: T,
    target_mean: T,
    target_sd: T,
}

fn euclid<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
        .sqrt()
}

impl<T: Scalar> Surrogate<T> {
    /// Fits the surrogate, refitting `(log ℓ, log var, log noise)` by MAP
    /// from `theta_init` (warm start from the previous iteration).
    fn fit(
        points: &[Vec<T>],
        values: &[T],
        theta_init: &DVector<T>,
    ) -> Option<(Self, DVector<T>)> {
        let n = values.len();
        let n_t: T = real(n as f64);
        let target_mean = values.iter().fold(T::zero(), |a, &v| a + v) / n_t;
        let mut target_sd = (values
            .iter()
            .fold(T::zero(), |a, &v| a + (v - target_mean) * (v - target_mean))
            / n_t)
            .sqrt();
        if !(target_sd > T::zero()) {
            target_sd = T::one();
        }
        let targets: Vec<T> = values.iter().map(|&v| (v - target_mean) / target_sd).collect();
        let y = DVector::from_vec(targets);

        let distances = DMatrix::from_fn(n, n, |i, j| euclid(&points[i], &points[j]));

        // Penalized surrogate evidence over (log ℓ, log σ², log σ_n²).
        let objective = |theta: &DVector<T>| -> Option<(T, DVector<T>)> {
            let lengthscale = theta[0].exp();
            let variance = theta[1].exp();
            let noise = theta[2].exp();
            if ![lengthscale, variance, noise]
                .iter()
                .all(|v| v.is_finite_scalar() && *v > T::zero())
            {
                return None;
            }
            let mut k = DMatrix::from_fn(n, n, |i, j| {
                rbf_kernel(lengthscale, variance, distances[(i, j)])
            });
            for i in 0..n {
                k[(i, i)] += noise;
            }
            let (chol, _) = cholesky_with_jitter(&k).ok()?;
            let alpha = chol.solve(&y);
            let half: T = real(0.5);
            let quad = y.dot(&alpha);
            let log_det_half = chol
                .l()
                .diagonal()
                .iter()
                .fold(T::zero(), |a, &d| a + d.ln());
            let ln_2pi: T = real((2.0 * std::f64::consts::PI).ln());
            let lml = -half * quad - log_det_half - half * n_t * ln_2pi;

            // Weak log-normal priors keep the refit well posed early on.
            let prior = |x: T, mean: f64, sd: f64| {
                let z = (x - real(mean)) / real(sd);
                -z * z / real::<T>(2.0)
            };
            let prior_grad = |x: T, mean: f64, sd: f64| -(x - real(mean)) / real(sd * sd);
            let penalty = prior(theta[0], (0.3f64).ln(), 1.0)
                + prior(theta[1], 0.0, 1.0)
                + prior(theta[2], (1e-4f64).ln(), 3.0);

            // Gradient via the trace identity.
            let k_inv = chol.inverse();
            let mut grad = DVector::zeros(3);
            for i in 0..n {
                for j in i..n {
                    let weight: T = if i == j { half } else { real(1.0) };
                    let a_ij = alpha[i] * alpha[j] - k_inv[(i, j)];
                    let d = distances[(i, j)];
                    let k_rbf = rbf_kernel(lengthscale, variance, d);
                    let z = d / lengthscale;
                    grad[0] += weight * a_ij * k_rbf * z * z; // d/d log ℓ
                    grad[1] += weight * a_ij * k_rbf; // d/d log σ²
                }
                let a_ii = alpha[i] * alpha[i] - k_inv[(i, i)];
                grad[2] += half * noise * a_ii; // d/d log σ_n²
            }
            grad[0] += prior_grad(theta[0], (0.3f64).ln(), 1.0);
            grad[1] += prior_grad(theta[1], 0.0, 1.0);
            grad[2] += prior_grad(theta[2], (1e-4f64).ln(), 3.0);
            Some((-(lml + penalty), -grad))
        };

        let result = minimize(objective, theta_init, &OptimOptions::new(50, real(1e-5))).ok()?;
        let theta = result.x.clone();

        let lengthscale = theta[0].exp();
        let variance = theta[1].exp();
        let noise = theta[2].exp();
        if ![lengthscale, variance, noise]
            .iter()
            .all(|v| v.is_finite_scalar() && *v > T::zero())
        {
            return None;
        }
        let mut k = DMatrix::from_fn(n, n, |i, j| {
            rbf_kernel(lengthscale, variance, distances[(i, j)])
        });
        for i in 0..n {
            k[(i, i)] += noise;
        }
        let (chol, _) = cholesky_with_jitter(&k).ok()?;
        let alpha = chol.solve(&y);
        Some((
            Self {
                points: points.to_vec(),
                alpha,
                chol_l: chol.l(),
                lengthscale,
                variance,
                target_mean,
                target_sd,
            },
            theta,
        ))
    }

    /// Predictive mean and sd in standardized-target units.
    fn predict(&self, x: &[T]) -> (T, T) {
        let n = self.points.len();
        let k_star = DVector::from_fn(n, |i, _| {
            rbf_kernel(self.lengthscale, self.variance, euclid(&self.points[i], x))
        });
        let mean = k_star.dot(&self.alpha);
        let v = self
            .chol_l
            .solve_lower_triangular(&k_star)
            .unwrap_or_else(|| DVector::zeros(n));
        let var = (self.variance - v.norm_squared()).max(T::zero());
        (mean, var.sqrt())
    }

    fn standardized_best(&self, best: T) -> T {
        (best - self.target_mean) / self.target_sd
    }
}

/// Trace of a generic box-constrained maximization.
#[derive(Debug, Clone)]
pub struct BoxTrace<T: Scalar> {
    /// `(point, objective)` per evaluation, in evaluation order.
    pub evaluations: Vec<(Vec<T>, T)>,
    pub best_so_far: Vec<T>,
    pub best_point: Vec<T>,
    pub best_value: T,
}

/// Maximizes a black-box objective over a box with `budget` evaluations:
/// `n_init` scrambled-Halton points, then EI-guided candidates from a
/// surrogate GP. The objective may return `None` for failed evaluations.
pub fn optimize_box<T, F>(
    mut objective: F,
    bounds: &[(T, T)],
    budget: usize,
    n_init: usize,
    seed: u64,
) -> Result<BoxTrace<T>, BayesOptError>
where
    T: Scalar,
    F: FnMut(&[T]) -> Option<T>,
{
    if bounds.is_empty() {
        return Err(BayesOptError::InvalidConfig("empty search box".into()));
    }
    if n_init < 2 || budget < n_init {
        return Err(BayesOptError::InvalidConfig(format!(
            "need budget ≥ n_init ≥ 2, got budget {budget} and n_init {n_init}"
        )));
    }
    let dim = bounds.len();
    let from_unit = |u: &[T]| -> Vec<T> {
        u.iter()
            .zip(bounds)
            .map(|(&ui, &(lo, hi))| lo + ui * (hi - lo))
            .collect()
    };

    let mut evaluations: Vec<(Vec<T>, T)> = Vec::with_capacity(budget);
    let mut unit_points: Vec<Vec<T>> = Vec::with_capacity(budget);
    let mut values: Vec<T> = Vec::with_capacity(budget);
    let mut best_so_far: Vec<T> = Vec::with_capacity(budget);
    let mut best: Option<(Vec<T>, T)> = None;

    let record = |point: Vec<T>,
                      unit: Vec<T>,
                      value: Option<T>,
                      evaluations: &mut Vec<(Vec<T>, T)>,
                      unit_points: &mut Vec<Vec<T>>,
                      values: &mut Vec<T>,
                      best_so_far: &mut Vec<T>,
                      best: &mut Option<(Vec<T>, T)>| {
        if let Some(v) = value {
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                *best = Some((point.clone(), v));
            }
            evaluations.push((point, v));
            unit_points.push(unit);
            values.push(v);
            if let Some((_, b)) = best {
                best_so_far.push(*b);
            }
        }
    };

    for unit in scrambled_halton::<T>(n_init, dim, sub_seed(seed, 0x1717)) {
        let point = from_unit(&unit);
        let value = objective(&point);
        record(
            point,
            unit,
            value,
            &mut evaluations,
            &mut unit_points,
            &mut values,
            &mut best_so_far,
            &mut best,
        );
    }

    let mut surrogate_theta =
        DVector::from_vec(vec![real((0.3f64).ln()), T::zero(), real((1e-4f64).ln())]);
    let mut rng = ChaCha12Rng::seed_from_u64(sub_seed(seed, 0xACC));

    let mut spent = n_init; // attempts so far, including failed ones
    while spent < budget {
        spent += 1;
        // Fall back to random search until the surrogate has two successes.
        let candidate_unit: Vec<T> = if values.len() < 2 {
            (0..dim).map(|_| rng.random_range(T::zero()..T::one())).collect()
        } else {
            let (surrogate, theta) =
                match Surrogate::fit(&unit_points, &values, &surrogate_theta) {
                    Some(fit) => fit,
                    None => {
                        let unit: Vec<T> =
                            (0..dim).map(|_| rng.random_range(T::zero()..T::one())).collect();
                        let point = from_unit(&unit);
                        let value = objective(&point);
                        record(
                            point,
                            unit,
                            value,
                            &mut evaluations,
                            &mut unit_points,
                            &mut values,
                            &mut best_so_far,
                            &mut best,
                        );
                        continue;
                    }
                };
            surrogate_theta = theta;
            let incumbent =
                surrogate.standardized_best(best.as_ref().map(|(_, b)| *b).expect("has best"));

            let ei_of = |u: &[T]| {
                let (mean, sd) = surrogate.predict(u);
                expected_improvement(mean, sd, incumbent)
            };

            // Seeded cloud plus local polish around the best three.
            let mut cloud: Vec<(Vec<T>, T)> = (0..2048)
                .map(|_| {
                    let u: Vec<T> =
                        (0..dim).map(|_| rng.random_range(T::zero()..T::one())).collect();
                    let ei = ei_of(&u);
                    (u, ei)
                })
                .collect();
            cloud.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            let mut champion = cloud[0].clone();
            let radius: T = real(0.05);
            for seed_point in cloud.iter().take(3).map(|(u, _)| u.clone()).collect::<Vec<_>>() {
                for _ in 0..64 {
                    let u: Vec<T> = seed_point
                        .iter()
                        .map(|&c| {
                            (c + radius * T::standard_normal(&mut rng)).clamp(T::zero(), T::one())
                        })
                        .collect();
                    let ei = ei_of(&u);
                    if ei > champion.1 {
                        champion = (u, ei);
                    }
                }
            }
            champion.0
        };

        let point = from_unit(&candidate_unit);
        let value = objective(&point);
        record(
            point,
            candidate_unit,
            value,
            &mut evaluations,
            &mut unit_points,
            &mut values,
            &mut best_so_far,
            &mut best,
        );
    }

    let Some((best_point, best_value)) = best else {
        return Err(BayesOptError::AllCandidatesFailed);
    };
    Ok(BoxTrace {
        evaluations,
        best_so_far,
        best_point,
        best_value,
    })
}

/// Profiled objective for kernel tuning: frequencies and scales frozen at the
/// candidate, weights and noise fit by a short inner MAP.
struct ProfiledObjective<'a, T: Scalar> {
    posterior: &'a UnconstrainedPosterior<T>,
    prior: &'a HyperPrior<T>,
    q: usize,
    var_y: T,
    inner_iters: usize,
}

impl<T: Scalar> ProfiledObjective<'_, T> {
    /// Returns the penalized log marginal likelihood at the candidate along
    /// with the profiled `(weights, noise)` optimum.
    fn evaluate(&self, candidate: &[T]) -> Option<(T, Vec<T>, T)> {
        let q = self.q;
        let frequencies: Vec<T> = candidate[..q].to_vec();
        let scales: Vec<T> = candidate[q..].iter().map(|&lv| lv.exp()).collect();

        let std_series = self.posterior.standardized_series();
        let xs = std_series.timestamps().to_vec();
        let ys = std_series.values().to_vec();

        let inner = |theta: &DVector<T>| -> Option<(T, DVector<T>)> {
            let weights: Vec<T> = (0..q).map(|i| theta[i].exp()).collect();
            let noise_var = theta[q].exp();
            let params =
                SmKernelParams::new(weights, frequencies.clone(), scales.clone()).ok()?;
            let noise = NoiseParam::new(noise_var).ok()?;
            let model = GpModel::from_standardized(
                xs.clone(),
                ys.clone(),
                params,
                noise,
                *self.posterior.scaling(),
            )
            .ok()?;
            let (lml, lml_grad) = model.log_marginal_likelihood();
            if !lml.is_finite_scalar() {
                return None;
            }
            // Penalty: normal priors on log w and log σ²; the v prior is a
            // constant for a frozen candidate but kept for comparability.
            let mut value = lml;
            let mut grad = DVector::zeros(q + 1);
            for i in 0..q {
                let z = (theta[i] - self.prior.log_weight_mean) / self.prior.log_weight_sd;
                value += -z * z / real::<T>(2.0);
                grad[i] = lml_grad[i] - z / self.prior.log_weight_sd;
            }
            for &lv in &candidate[q..] {
                let z = (lv - self.prior.log_scale_mean) / self.prior.log_scale_sd;
                value += -z * z / real::<T>(2.0);
            }
            let zn = (theta[q] - self.prior.log_noise_mean) / self.prior.log_noise_sd;
            value += -zn * zn / real::<T>(2.0);
            grad[q] = lml_grad[3 * q] - zn / self.prior.log_noise_sd;
            Some((-value, -grad))
        };

        let mut theta0 = DVector::zeros(q + 1);
        for i in 0..q {
            theta0[i] = (self.var_y / real(q as f64)).ln();
        }
        theta0[q] = (real::<T>(0.1) * self.var_y).ln();

        let result = minimize(inner, &theta0, &OptimOptions::new(self.inner_iters, real(1e-5))).ok()?;
        let weights: Vec<T> = (0..q).map(|i| result.x[i].exp()).collect();
        Some((-result.value, weights, result.x[q].exp()))
    }
}

/// Tunes frequencies and scales by Bayesian optimization and returns the
/// fully refit model at the winning candidate plus the iteration trace.
pub fn tune<T: Scalar>(
    train: &TimeSeries<T>,
    q: usize,
    config: &TuneConfig<T>,
) -> Result<(GpModel<T>, TuneTrace<T>), BayesOptError> {
    config.validate()?;
    let posterior = UnconstrainedPosterior::new(train, q)?;
    let prior = *posterior.prior();
    let std_series = posterior.standardized_series();
    let var_y = std_series.variance();
    let f_nyq = prior.f_nyq;
    let x_range =
        std_series.timestamps()[std_series.len() - 1] - std_series.timestamps()[0];

    let bounds: Vec<(T, T)> = match &config.bounds {
        Some(b) => {
            if b.len() != 2 * q {
                return Err(BayesOptError::InvalidConfig(format!(
                    "expected {} bounds, got {}",
                    2 * q,
                    b.len()
                )));
            }
            b.clone()
        }
        None => {
            let mut b = vec![(T::zero(), f_nyq); q];
            let v_lo = (real::<T>(0.1) / x_range).ln();
            let v_hi = (real::<T>(10.0) * f_nyq).ln();
            b.extend(std::iter::repeat((v_lo, v_hi)).take(q));
            b
        }
    };

    let profiled = ProfiledObjective {
        posterior: &posterior,
        prior: &prior,
        q,
        var_y,
        inner_iters: 100,
    };

    let trace = optimize_box(
        |candidate| profiled.evaluate(candidate).map(|(value, _, _)| value),
        &bounds,
        config.budget,
        config.n_init,
        config.seed,
    )?;

    // Full refit at the winner: same inner problem, production budget.
    let full = ProfiledObjective {
        posterior: &posterior,
        prior: &prior,
        q,
        var_y,
        inner_iters: 500,
    };
    let (best_objective, weights, noise_var) = full
        .evaluate(&trace.best_point)
        .ok_or(BayesOptError::AllCandidatesFailed)?;
    let frequencies: Vec<T> = trace.best_point[..q].to_vec();
    let scales: Vec<T> = trace.best_point[q..].iter().map(|&lv| lv.exp()).collect();
    let best_params = SmKernelParams::new(weights, frequencies, scales)?;
    let best_noise = NoiseParam::new(noise_var)?;
    let model = GpModel::build(train, best_params.clone(), best_noise)?;

    let iterations = trace
        .evaluations
        .iter()
        .zip(&trace.best_so_far)
        .map(|((point, value), &best)| {
            let mut candidate: Vec<T> = point[..q].to_vec();
            candidate.extend(point[q..].iter().map(|&lv| lv.exp()));
            TuneIteration {
                candidate,
                objective: *value,
                best_so_far: best,
            }
        })
        .collect();

    Ok((
        model,
        TuneTrace {
            iterations,
            best_params,
            best_noise,
            best_objective,
        },
    ))
}

/// Renders a trace as CSV: `iter,objective,best_so_far` plus one column per
/// tuned dimension (`mu_1..Q, v_1..Q`).
pub fn export_trace<T: Scalar>(trace: &TuneTrace<T>) -> String {
    let q = trace.best_params.q();
    let mut out = String::from("iter,objective,best_so_far");
    for i in 1..=q {
        out.push_str(&format!(",mu_{i}"));
    }
    for i in 1..=q {
        out.push_str(&format!(",v_{i}"));
    }
    out.push('\n');
    let fmt = crate::timeseries::format_real::<T>;
    for (idx, iteration) in trace.iterations.iter().enumerate() {
        out.push_str(&format!(
            "{idx},{},{}",
            fmt(iteration.objective),
            fmt(iteration.best_so_far)
        ));
        for &c in &iteration.candidate {
            out.push(',');
            out.push_str(&fmt(c));
        }
        out.push('\n');
    }
    out
}
