//! Property tests for the crate's structural invariants.

use proptest::prelude::*;

use specmix::bayesopt::expected_improvement;
use specmix::eval::{mape, rmse};
use specmix::kernels::{kernel_matrix, sm_kernel, NoiseParam, SmKernelParams};
use specmix::timeseries::{
    load_csv, split, standardize, to_csv_string, unstandardize, TimeSeries,
};

fn series_strategy() -> impl Strategy<Value = TimeSeries<f64>> {
    (2usize..30)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(0.01f64..5.0, n),
                proptest::collection::vec(-1e3f64..1e3, n),
            )
        })
        .prop_filter_map("needs spread in values", |(gaps, values)| {
            let mut t = 0.0;
            let timestamps: Vec<f64> = gaps
                .iter()
                .map(|g| {
                    t += g;
                    t
                })
                .collect();
            let series = TimeSeries::new(timestamps, values, "prop").ok()?;
            (series.variance() > 1e-12).then_some(series)
        })
}

fn params_strategy() -> impl Strategy<Value = (SmKernelParams<f64>, f64)> {
    (1usize..=3)
        .prop_flat_map(|q| {
            (
                proptest::collection::vec(0.05f64..3.0, q),
                proptest::collection::vec(0.0f64..2.0, q),
                proptest::collection::vec(0.01f64..1.0, q),
                1e-6f64..0.5,
            )
        })
        .prop_map(|(w, mu, v, noise)| (SmKernelParams::new(w, mu, v).unwrap(), noise))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardize_round_trip_is_identity((series) in series_strategy()) {
        let (standardized, scaling) = standardize(&series).unwrap();
        let back = unstandardize(&standardized, &scaling).unwrap();
        for (a, b) in back.values().iter().zip(series.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (a, b) in back.timestamps().iter().zip(series.timestamps()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn split_concatenation_reconstructs((series, frac) in (series_strategy(), 0.0f64..1.0)) {
        let n_train = 1 + ((series.len() - 1) as f64 * frac) as usize;
        let parts = split(&series, n_train).unwrap();
        let mut ts = parts.train.timestamps().to_vec();
        let mut vals = parts.train.values().to_vec();
        if let Some(test) = &parts.test {
            ts.extend_from_slice(test.timestamps());
            vals.extend_from_slice(test.values());
        }
        prop_assert_eq!(ts, series.timestamps());
        prop_assert_eq!(vals, series.values());
    }

    #[test]
    fn csv_round_trip_is_exact(series in series_strategy()) {
        let path = std::env::temp_dir().join(format!(
            "specmix-prop-{}-{:x}.csv",
            std::process::id(),
            series.values().iter().fold(0u64, |a, v| a.wrapping_add(v.to_bits()))
        ));
        std::fs::write(&path, to_csv_string(&series)).unwrap();
        let loaded: TimeSeries<f64> = load_csv(&path).unwrap();
        std::fs::remove_file(&path).ok();
        prop_assert_eq!(loaded.timestamps(), series.timestamps());
        prop_assert_eq!(loaded.values(), series.values());
    }

    #[test]
    fn kernel_is_even_and_bounded(((params, _), tau) in (params_strategy(), -20.0f64..20.0)) {
        let k = sm_kernel(&params, tau);
        prop_assert_eq!(k.to_bits(), sm_kernel(&params, -tau).to_bits());
        prop_assert!(k.abs() <= params.total_weight() + 1e-12);
    }

    #[test]
    fn kernel_matrix_is_psd(((params, noise), raw_xs) in (
        params_strategy(),
        proptest::collection::vec(0.0f64..50.0, 2..40),
    )) {
        let mut xs = raw_xs;
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let m = kernel_matrix(&params, NoiseParam::new(noise).unwrap(), &xs);
        let eigs = m.symmetric_eigen().eigenvalues;
        let min_eig = eigs.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = m.trace() / xs.len() as f64;
        prop_assert!(min_eig >= -1e-8 * scale, "min eig {} at scale {}", min_eig, scale);
    }

    #[test]
    fn expected_improvement_is_nonnegative((mean, sd, best) in
        (-1e3f64..1e3, 0.0f64..1e3, -1e3f64..1e3))
    {
        let ei = expected_improvement(mean, sd, best);
        prop_assert!(ei >= 0.0);
        if sd == 0.0 {
            prop_assert_eq!(ei, (mean - best).max(0.0));
        }
    }

    #[test]
    fn ei_shrinks_to_hinge_as_sd_vanishes((mean, best) in (-10.0f64..10.0, -10.0f64..10.0)) {
        let hinge = (mean - best).max(0.0);
        let ei = expected_improvement(mean, 1e-12, best);
        prop_assert!((ei - hinge).abs() <= 1e-9);
    }

    #[test]
    fn metric_scale_behavior((pairs, c) in (
        proptest::collection::vec((0.1f64..100.0, -100.0f64..100.0), 1..20),
        proptest::sample::select(vec![-3.0f64, -0.5, 0.25, 2.0, 10.0]),
    )) {
        let actual: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let predicted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ca: Vec<f64> = actual.iter().map(|v| c * v).collect();
        let cp: Vec<f64> = predicted.iter().map(|v| c * v).collect();

        let r = rmse(&actual, &predicted).unwrap();
        let rc = rmse(&ca, &cp).unwrap();
        prop_assert!((rc - c.abs() * r).abs() <= 1e-9 * (1.0 + rc.abs()));

        let m = mape(&actual, &predicted).unwrap();
        let mc = mape(&ca, &cp).unwrap();
        prop_assert!((mc - m).abs() <= 1e-9 * (1.0 + m.abs()));

        prop_assert_eq!(rmse(&actual, &predicted).unwrap(), rmse(&predicted, &actual).unwrap());
    }
}
