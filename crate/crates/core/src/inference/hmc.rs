//! Leapfrog Hamiltonian Monte Carlo with dual-averaging step-size adaptation
//! and dynamic path-length doubling terminated by the U-turn criterion.
//!
//! Warmup adapts the step size toward the target acceptance statistic; a
//! diagonal mass matrix is estimated from the second half of warmup and used
//! for the sampling phase. Transitions whose energy error exceeds
//! [`DIVERGENCE_THRESHOLD`] are flagged as divergent.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::scalar::{real, Scalar};

/// Energy-error bound beyond which a trajectory counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Differentiable unnormalized log-density to sample from.
///
/// `logp_grad` may return `None` for rejected states (failed factorization,
/// out-of-support points); the sampler treats those as log-density −∞.
pub trait LogpTarget<T: Scalar> {
    fn dim(&self) -> usize;
    fn logp_grad(&self, position: &DVector<T>) -> Option<(T, DVector<T>)>;
}

#[derive(Debug, Clone)]
pub(crate) struct ChainOptions<T: Scalar> {
    pub n_warmup: usize,
    pub n_samples: usize,
    pub target_accept: T,
    pub max_leapfrog: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct ChainRun<T: Scalar> {
    pub draws: Vec<DVector<T>>,
    pub log_posterior: Vec<T>,
    /// Mean acceptance statistic over post-warmup transitions.
    pub accept_mean: T,
    pub divergences: usize,
}

struct Tree<T: Scalar> {
    theta_minus: DVector<T>,
    r_minus: DVector<T>,
    grad_minus: DVector<T>,
    theta_plus: DVector<T>,
    r_plus: DVector<T>,
    grad_plus: DVector<T>,
    proposal: DVector<T>,
    proposal_logp: T,
    n_valid: usize,
    keep_going: bool,
    diverged: bool,
    alpha_sum: T,
    n_alpha: usize,
}

struct Sampler<'a, T: Scalar, Tgt: LogpTarget<T>> {
    target: &'a Tgt,
    mass_inv: DVector<T>,
    rng: ChaCha12Rng,
}

impl<'a, T: Scalar, Tgt: LogpTarget<T>> Sampler<'a, T, Tgt> {
    fn kinetic(&self, r: &DVector<T>) -> T {
        let half: T = real(0.5);
        half * r.iter().zip(self.mass_inv.iter()).fold(T::zero(), |a, (&ri, &mi)| a + ri * ri * mi)
    }

    fn draw_momentum(&mut self) -> DVector<T> {
        DVector::from_fn(self.mass_inv.len(), |i, _| {
            T::standard_normal(&mut self.rng) / self.mass_inv[i].sqrt()
        })
    }

    fn leapfrog(
        &self,
        theta: &DVector<T>,
        r: &DVector<T>,
        grad: &DVector<T>,
        eps: T,
    ) -> Option<(DVector<T>, DVector<T>, DVector<T>, T)> {
        let half: T = real(0.5);
        let r_half = r + grad * (half * eps);
        let theta_new = theta + r_half.component_mul(&self.mass_inv) * eps;
        let (logp_new, grad_new) = self.target.logp_grad(&theta_new)?;
        if !logp_new.is_finite_scalar() {
            return None;
        }
        let r_new = &r_half + &grad_new * (half * eps);
        Some((theta_new, r_new, grad_new, logp_new))
    }

    fn uturn(
        &self,
        theta_minus: &DVector<T>,
        theta_plus: &DVector<T>,
        r_minus: &DVector<T>,
        r_plus: &DVector<T>,
    ) -> bool {
        let span = theta_plus - theta_minus;
        let v_minus = r_minus.component_mul(&self.mass_inv);
        let v_plus = r_plus.component_mul(&self.mass_inv);
        span.dot(&v_minus) < T::zero() || span.dot(&v_plus) < T::zero()
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        theta: &DVector<T>,
        r: &DVector<T>,
        grad: &DVector<T>,
        log_u: T,
        forward: bool,
        depth: usize,
        joint0: T,
        eps: T,
    ) -> Tree<T> {
        if depth == 0 {
            let dir_eps = if forward { eps } else { -eps };
            let threshold: T = real(DIVERGENCE_THRESHOLD);
            return match self.leapfrog(theta, r, grad, dir_eps) {
                Some((theta_new, r_new, grad_new, logp_new)) => {
                    let joint = logp_new - self.kinetic(&r_new);
                    let diverged = log_u - joint > threshold;
                    let alpha = if joint - joint0 > T::zero() {
                        T::one()
                    } else {
                        (joint - joint0).exp()
                    };
                    Tree {
                        theta_minus: theta_new.clone(),
                        r_minus: r_new.clone(),
                        grad_minus: grad_new.clone(),
                        theta_plus: theta_new.clone(),
                        r_plus: r_new.clone(),
                        grad_plus: grad_new.clone(),
                        proposal: theta_new,
                        proposal_logp: logp_new,
                        n_valid: usize::from(log_u <= joint),
                        keep_going: !diverged,
                        diverged,
                        alpha_sum: alpha,
                        n_alpha: 1,
                    }
                }
                None => Tree {
                    // Rejected state: divergent leaf, never selectable.
                    theta_minus: theta.clone(),
                    r_minus: r.clone(),
                    grad_minus: grad.clone(),
                    theta_plus: theta.clone(),
                    r_plus: r.clone(),
                    grad_plus: grad.clone(),
                    proposal: theta.clone(),
                    proposal_logp: joint0,
                    n_valid: 0,
                    keep_going: false,
                    diverged: true,
                    alpha_sum: T::zero(),
                    n_alpha: 1,
                },
            };
        }

        let mut left = self.build_tree(theta, r, grad, log_u, forward, depth - 1, joint0, eps);
        if !left.keep_going {
            return left;
        }
        let right = if forward {
            self.build_tree(
                &left.theta_plus.clone(),
                &left.r_plus.clone(),
                &left.grad_plus.clone(),
                log_u,
                forward,
                depth - 1,
                joint0,
                eps,
            )
        } else {
            self.build_tree(
                &left.theta_minus.clone(),
                &left.r_minus.clone(),
                &left.grad_minus.clone(),
                log_u,
                forward,
                depth - 1,
                joint0,
                eps,
            )
        };
        if forward {
            left.theta_plus = right.theta_plus;
            left.r_plus = right.r_plus;
            left.grad_plus = right.grad_plus;
        } else {
            left.theta_minus = right.theta_minus;
            left.r_minus = right.r_minus;
            left.grad_minus = right.grad_minus;
        }
        let total = left.n_valid + right.n_valid;
        if right.n_valid > 0 {
            let take: f64 = self.rng.random();
            if take * total as f64 <= right.n_valid as f64 {
                left.proposal = right.proposal;
                left.proposal_logp = right.proposal_logp;
            }
        }
        left.n_valid = total;
        left.alpha_sum += right.alpha_sum;
        left.n_alpha += right.n_alpha;
        left.diverged |= right.diverged;
        left.keep_going = right.keep_going
            && !self.uturn(&left.theta_minus, &left.theta_plus, &left.r_minus, &left.r_plus);
        left
    }

    /// One HMC transition. Returns the new state, the mean acceptance
    /// statistic of the final doubling, and whether any leaf diverged.
    fn transition(
        &mut self,
        theta: DVector<T>,
        logp: T,
        grad: DVector<T>,
        eps: T,
        max_depth: usize,
    ) -> (DVector<T>, T, DVector<T>, T, bool) {
        let r0 = self.draw_momentum();
        let joint0 = logp - self.kinetic(&r0);
        // Slice variable: log u = joint0 + ln(U), U uniform.
        let u: f64 = self.rng.random();
        let log_u = joint0 + real::<T>((1.0 - u).max(f64::MIN_POSITIVE).ln());

        let mut theta_minus = theta.clone();
        let mut r_minus = r0.clone();
        let mut grad_minus = grad.clone();
        let mut theta_plus = theta.clone();
        let mut r_plus = r0;
        let mut grad_plus = grad.clone();
        let mut proposal = theta;
        let mut proposal_logp = logp;
        let mut proposal_grad = grad;
        let mut n_valid = 1usize;
        let mut accept_stat = T::zero();
        let mut diverged = false;

        for depth in 0..max_depth {
            let forward = self.rng.random::<bool>();
            let tree = if forward {
                self.build_tree(
                    &theta_plus.clone(),
                    &r_plus.clone(),
                    &grad_plus.clone(),
                    log_u,
                    true,
                    depth,
                    joint0,
                    eps,
                )
            } else {
                self.build_tree(
                    &theta_minus.clone(),
                    &r_minus.clone(),
                    &grad_minus.clone(),
                    log_u,
                    false,
                    depth,
                    joint0,
                    eps,
                )
            };
            if forward {
                theta_plus = tree.theta_plus.clone();
                r_plus = tree.r_plus.clone();
                grad_plus = tree.grad_plus.clone();
            } else {
                theta_minus = tree.theta_minus.clone();
                r_minus = tree.r_minus.clone();
                grad_minus = tree.grad_minus.clone();
            }
            accept_stat = tree.alpha_sum / real(tree.n_alpha as f64);
            diverged |= tree.diverged;

            if tree.keep_going && tree.n_valid > 0 {
                let take: f64 = self.rng.random();
                if take * n_valid as f64 <= tree.n_valid as f64 {
                    proposal = tree.proposal.clone();
                    proposal_logp = tree.proposal_logp;
                    if let Some((_, g)) = self.target.logp_grad(&proposal) {
                        proposal_grad = g;
                    }
                }
            }
            n_valid += tree.n_valid;
            let done = !tree.keep_going
                || self.uturn(&theta_minus, &theta_plus, &r_minus, &r_plus);
            if done {
                break;
            }
        }
        (proposal, proposal_logp, proposal_grad, accept_stat, diverged)
    }

    /// Step-size initialization heuristic: doubles or halves until the
    /// one-step acceptance crosses 1/2.
    fn reasonable_epsilon(&mut self, theta: &DVector<T>, logp: T, grad: &DVector<T>) -> T {
        let mut eps = T::one();
        let r = self.draw_momentum();
        let joint0 = logp - self.kinetic(&r);
        let half_log = real::<T>(0.5f64.ln());

        let joint_at = |s: &Self, e: T| -> Option<T> {
            s.leapfrog(theta, &r, grad, e)
                .map(|(_, r_new, _, logp_new)| logp_new - s.kinetic(&r_new))
        };
        let Some(mut joint) = joint_at(self, eps) else {
            // Immediate failure: shrink until the step is representable.
            for _ in 0..60 {
                eps *= real(0.5);
                if joint_at(self, eps).is_some() {
                    return eps;
                }
            }
            return eps;
        };
        let doubling = joint - joint0 > half_log;
        for _ in 0..60 {
            eps = if doubling { eps * real(2.0) } else { eps * real(0.5) };
            match joint_at(self, eps) {
                Some(j) => joint = j,
                None => {
                    if doubling {
                        return eps * real(0.5);
                    }
                    continue;
                }
            }
            let above = joint - joint0 > half_log;
            if above != doubling {
                break;
            }
        }
        eps
    }
}

/// Runs one chain from `theta0`; draws are collected after `n_warmup`
/// adaptation transitions.
pub(crate) fn run_chain<T: Scalar, Tgt: LogpTarget<T>>(
    target: &Tgt,
    theta0: DVector<T>,
    opts: &ChainOptions<T>,
) -> Option<ChainRun<T>> {
    let dim = target.dim();
    let max_depth = (opts.max_leapfrog.max(2) as f64).log2().floor() as usize;
    let mut sampler = Sampler {
        target,
        mass_inv: DVector::from_element(dim, T::one()),
        rng: ChaCha12Rng::seed_from_u64(opts.seed),
    };

    let (mut logp, mut grad) = target.logp_grad(&theta0)?;
    let mut theta = theta0;

    // Dual averaging state (per Hoffman–Gelman, γ=0.05, t₀=10, κ=0.75).
    let mut eps = sampler.reasonable_epsilon(&theta, logp, &grad);
    let mu = (real::<T>(10.0) * eps).ln();
    let gamma: T = real(0.05);
    let t0: T = real(10.0);
    let kappa = 0.75;
    let mut h_bar = T::zero();
    let mut log_eps_bar = T::zero();

    let second_half_start = opts.n_warmup / 2;
    let mut mass_buffer: Vec<DVector<T>> = Vec::new();

    for m in 1..=opts.n_warmup {
        let (t, lp, g, accept, _) = sampler.transition(theta, logp, grad, eps, max_depth);
        theta = t;
        logp = lp;
        grad = g;

        let m_t: T = real(m as f64);
        let frac = T::one() / (m_t + t0);
        h_bar = (T::one() - frac) * h_bar + frac * (opts.target_accept - accept);
        let log_eps = mu - m_t.sqrt() / gamma * h_bar;
        let weight: T = real((m as f64).powf(-kappa));
        log_eps_bar = weight * log_eps + (T::one() - weight) * log_eps_bar;
        eps = log_eps.exp();

        if m > second_half_start {
            mass_buffer.push(theta.clone());
        }
    }

    if opts.n_warmup > 0 {
        eps = log_eps_bar.exp();
    }

    // Diagonal mass from the second half of warmup, shrunk toward a small
    // constant for stability.
    if mass_buffer.len() >= 2 {
        let k = mass_buffer.len();
        let k_t: T = real(k as f64);
        let shrink_n = k_t / (k_t + real(5.0));
        let shrink_c = real::<T>(5.0) / (k_t + real(5.0));
        let mut mass = DVector::from_element(dim, T::one());
        for d in 0..dim {
            let mean = mass_buffer.iter().fold(T::zero(), |a, x| a + x[d]) / k_t;
            let var = mass_buffer
                .iter()
                .fold(T::zero(), |a, x| a + (x[d] - mean) * (x[d] - mean))
                / (k_t - T::one());
            mass[d] = (var * shrink_n + real::<T>(1e-3) * shrink_c).max(real(1e-10));
        }
        sampler.mass_inv = mass.map(|m| T::one() / m);
    }

    let mut draws = Vec::with_capacity(opts.n_samples);
    let mut log_posterior = Vec::with_capacity(opts.n_samples);
    let mut accept_sum = T::zero();
    let mut divergences = 0usize;
    for _ in 0..opts.n_samples {
        let (t, lp, g, accept, diverged) = sampler.transition(theta, logp, grad, eps, max_depth);
        theta = t;
        logp = lp;
        grad = g;
        accept_sum += accept;
        divergences += usize::from(diverged);
        draws.push(theta.clone());
        log_posterior.push(logp);
    }

    Some(ChainRun {
        draws,
        log_posterior,
        accept_mean: accept_sum / real(opts.n_samples.max(1) as f64),
        divergences,
    })
}
