//! Convergence diagnostics for MCMC output: split-R̂ and effective sample
//! size via Geyer's initial monotone sequence estimator.

use nalgebra::DVector;

use crate::scalar::{real, Scalar};

/// Per-parameter split-R̂ and ESS computed over all chains.
#[derive(Debug, Clone)]
pub struct ChainDiagnostics<T: Scalar> {
    pub split_rhat: Vec<T>,
    pub ess: Vec<T>,
    /// Post-warmup divergent transitions across all chains.
    pub divergences: usize,
    pub warnings: Vec<String>,
}

/// Splits every chain in half and returns `(split_rhat, ess)` per dimension.
///
/// `chains[c]` holds the post-warmup draws of chain `c`; all chains must have
/// the same length ≥ 4.
pub fn split_diagnostics<T: Scalar>(chains: &[Vec<DVector<T>>]) -> (Vec<T>, Vec<T>) {
    assert!(!chains.is_empty() && !chains[0].is_empty());
    let dim = chains[0][0].len();
    let half = chains.iter().map(|c| c.len()).min().unwrap() / 2;
    assert!(half >= 2, "need at least 4 draws per chain for split diagnostics");

    // 2 sequences per chain.
    let mut rhat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut sequences: Vec<Vec<T>> = Vec::with_capacity(2 * chains.len());
        for chain in chains {
            sequences.push(chain[..half].iter().map(|x| x[d]).collect());
            sequences.push(chain[half..2 * half].iter().map(|x| x[d]).collect());
        }
        let (r, e) = sequence_diagnostics(&sequences);
        rhat.push(r);
        ess.push(e);
    }
    (rhat, ess)
}

fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |a, &b| a + b) / real(xs.len() as f64)
}

fn sample_var<T: Scalar>(xs: &[T], m: T) -> T {
    xs.iter().fold(T::zero(), |a, &b| a + (b - m) * (b - m)) / real((xs.len() - 1) as f64)
}

/// Biased (1/n) autocovariance at lag `t`.
fn autocov<T: Scalar>(xs: &[T], m: T, t: usize) -> T {
    let n = xs.len();
    let mut acc = T::zero();
    for i in 0..n - t {
        acc += (xs[i] - m) * (xs[i + t] - m);
    }
    acc / real(n as f64)
}

fn sequence_diagnostics<T: Scalar>(sequences: &[Vec<T>]) -> (T, T) {
    let m = sequences.len();
    let n = sequences[0].len();
    let n_t: T = real(n as f64);
    let total: T = real((m * n) as f64);

    let means: Vec<T> = sequences.iter().map(|s| mean(s)).collect();
    let vars: Vec<T> = sequences
        .iter()
        .zip(&means)
        .map(|(s, &mu)| sample_var(s, mu))
        .collect();
    let w = mean(&vars);
    let grand = mean(&means);
    let b_over_n = sample_var(&means, grand); // = B/n
    let var_plus = (n_t - T::one()) / n_t * w + b_over_n;

    if !(var_plus > T::zero()) || !(w > T::zero()) {
        // Degenerate (constant) sequences: perfectly mixed by definition.
        return (T::one(), total);
    }

    let rhat = (var_plus / w).sqrt();

    // Combined autocorrelation: ρ̂_t = 1 − (W − mean_c acov_{c,t}) / var⁺.
    let rho = |t: usize| -> T {
        let acc = sequences
            .iter()
            .zip(&means)
            .fold(T::zero(), |a, (s, &mu)| a + autocov(s, mu, t));
        let mean_acov = acc / real(m as f64);
        T::one() - (w - mean_acov) / var_plus
    };

    // Geyer initial monotone positive sequence over lag pairs.
    let max_pairs = (n - 1) / 2;
    let mut tau = -T::one();
    let mut prev_pair: Option<T> = None;
    for k in 0..max_pairs {
        let mut pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= T::zero() {
            break;
        }
        if let Some(prev) = prev_pair {
            if pair > prev {
                pair = prev;
            }
        }
        prev_pair = Some(pair);
        tau += real::<T>(2.0) * pair;
    }
    if tau < real(1e-6) {
        tau = real(1e-6);
    }
    (rhat, total / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn iid_chains(n_chains: usize, n: usize, seed: u64) -> Vec<Vec<DVector<f64>>> {
        (0..n_chains)
            .map(|c| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed + c as u64);
                (0..n)
                    .map(|_| DVector::from_fn(2, |_, _| f64::standard_normal(&mut rng)))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn iid_draws_have_unit_rhat_and_near_total_ess() {
        let chains = iid_chains(2, 1000, 1);
        let (rhat, ess) = split_diagnostics(&chains);
        for r in rhat {
            assert!((r - 1.0).abs() < 0.02, "rhat {r}");
        }
        for e in ess {
            assert!(e > 1200.0, "ess {e} too small for iid draws");
        }
    }

    #[test]
    fn disjoint_chains_are_flagged() {
        // Two chains stuck at different constants plus tiny wiggle.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let chains: Vec<Vec<DVector<f64>>> = (0..2)
            .map(|c| {
                let offset = c as f64 * 10.0;
                (0..200)
                    .map(|_| {
                        DVector::from_fn(1, |_, _| offset + 0.01 * f64::standard_normal(&mut rng))
                    })
                    .collect()
            })
            .collect();
        let (rhat, _) = split_diagnostics(&chains);
        assert!(rhat[0] > 3.0, "rhat {} should flag disjoint chains", rhat[0]);
    }

    #[test]
    fn correlated_chain_has_reduced_ess() {
        // AR(1) with strong positive correlation.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let phi = 0.95;
        let chains: Vec<Vec<DVector<f64>>> = (0..2)
            .map(|_| {
                let mut x = 0.0;
                (0..2000)
                    .map(|_| {
                        x = phi * x + (1.0f64 - phi * phi).sqrt() * f64::standard_normal(&mut rng);
                        DVector::from_vec(vec![x])
                    })
                    .collect()
            })
            .collect();
        let (_, ess) = split_diagnostics(&chains);
        // Theoretical factor (1−φ)/(1+φ) ≈ 0.026 of 4000 ≈ 103.
        assert!(ess[0] < 400.0, "ess {} too optimistic", ess[0]);
        assert!(ess[0] > 20.0, "ess {} collapsed", ess[0]);
    }
}
