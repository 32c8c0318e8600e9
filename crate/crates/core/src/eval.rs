//! Forecast accuracy metrics, interval coverage, and model-comparison
//! tables.

use std::fmt;

use thiserror::Error;

use crate::scalar::{real, Scalar};
use crate::timeseries::format_real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("MAPE undefined: actual value at index {index} is zero")]
    ZeroActual { index: usize },
    #[error("invalid interval at index {index}: lower bound exceeds upper bound")]
    InvalidInterval { index: usize },
    #[error("no reports to compare")]
    NoReports,
}

fn check_lengths<T>(a: &[T], b: &[T]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

/// Root mean square error `sqrt(mean((a_i − p_i)²))`.
pub fn rmse<T: Scalar>(actual: &[T], predicted: &[T]) -> Result<T, EvalError> {
    check_lengths(actual, predicted)?;
    let n: T = real(actual.len() as f64);
    let ss = actual
        .iter()
        .zip(predicted)
        .fold(T::zero(), |acc, (&a, &p)| acc + (a - p) * (a - p));
    Ok((ss / n).sqrt())
}

/// Mean absolute percentage error `100 · mean(|a_i − p_i| / |a_i|)`.
///
/// Errors out (naming the index) when any actual value is zero rather than
/// silently skipping the point.
pub fn mape<T: Scalar>(actual: &[T], predicted: &[T]) -> Result<T, EvalError> {
    check_lengths(actual, predicted)?;
    let mut acc = T::zero();
    for (index, (&a, &p)) in actual.iter().zip(predicted).enumerate() {
        if a == T::zero() {
            return Err(EvalError::ZeroActual { index });
        }
        acc += ((a - p) / a).abs();
    }
    Ok(real::<T>(100.0) * acc / real(actual.len() as f64))
}

/// Fraction of actuals inside the closed interval `[lo_i, hi_i]`.
pub fn interval_coverage<T: Scalar>(
    actual: &[T],
    lo: &[T],
    hi: &[T],
) -> Result<T, EvalError> {
    check_lengths(actual, lo)?;
    check_lengths(actual, hi)?;
    let mut covered = 0usize;
    for (index, ((&a, &l), &h)) in actual.iter().zip(lo).zip(hi).enumerate() {
        if l > h {
            return Err(EvalError::InvalidInterval { index });
        }
        if l <= a && a <= h {
            covered += 1;
        }
    }
    Ok(real::<T>(covered as f64) / real(actual.len() as f64))
}

/// Accuracy summary for one model on one test window.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<T: Scalar> {
    pub model_name: String,
    pub rmse: T,
    /// In percent.
    pub mape: T,
    /// Fraction in `[0, 1]`.
    pub coverage95: T,
    pub n_test: usize,
}

impl<T: Scalar> MetricsReport<T> {
    /// Computes all metrics for one model from aligned test data.
    pub fn from_forecast(
        model_name: impl Into<String>,
        actual: &[T],
        predicted: &[T],
        lo95: &[T],
        hi95: &[T],
    ) -> Result<Self, EvalError> {
        Ok(Self {
            model_name: model_name.into(),
            rmse: rmse(actual, predicted)?,
            mape: mape(actual, predicted)?,
            coverage95: interval_coverage(actual, lo95, hi95)?,
            n_test: actual.len(),
        })
    }
}

/// Comparison of several models on the same test window; the best RMSE and
/// best MAPE rows are flagged (ties flag every winner).
#[derive(Debug, Clone)]
pub struct ComparisonTable<T: Scalar> {
    pub reports: Vec<MetricsReport<T>>,
    pub best_rmse: Vec<bool>,
    pub best_mape: Vec<bool>,
}

/// Builds the comparison table, flagging minimum-RMSE and minimum-MAPE rows.
pub fn compare_models<T: Scalar>(
    reports: Vec<MetricsReport<T>>,
) -> Result<ComparisonTable<T>, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let min_rmse = reports
        .iter()
        .map(|r| r.rmse)
        .fold(None::<T>, |acc, v| Some(acc.map_or(v, |a| if v < a { v } else { a })))
        .expect("nonempty");
    let min_mape = reports
        .iter()
        .map(|r| r.mape)
        .fold(None::<T>, |acc, v| Some(acc.map_or(v, |a| if v < a { v } else { a })))
        .expect("nonempty");
    let best_rmse = reports.iter().map(|r| r.rmse == min_rmse).collect();
    let best_mape = reports.iter().map(|r| r.mape == min_mape).collect();
    Ok(ComparisonTable {
        reports,
        best_rmse,
        best_mape,
    })
}

impl<T: Scalar> ComparisonTable<T> {
    /// CSV form: `model,rmse,mape,coverage95,n_test`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,rmse,mape,coverage95,n_test\n");
        for report in &self.reports {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                report.model_name,
                format_real(report.rmse),
                format_real(report.mape),
                format_real(report.coverage95),
                report.n_test
            ));
        }
        out
    }
}

impl<T: Scalar> fmt::Display for ComparisonTable<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_width = self
            .reports
            .iter()
            .map(|r| r.model_name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<name_width$}  {:>10}  {:>10}  {:>10}  {:>6}",
            "MODEL", "RMSE", "MAPE", "COVER95", "N"
        )?;
        for (i, report) in self.reports.iter().enumerate() {
            let rmse_flag = if self.best_rmse[i] { "*" } else { " " };
            let mape_flag = if self.best_mape[i] { "*" } else { " " };
            writeln!(
                f,
                "{:<name_width$}  {:>9.4}{}  {:>8.2}%{}  {:>10.2}  {:>6}",
                report.model_name,
                report.rmse.to_f64().unwrap_or(f64::NAN),
                rmse_flag,
                report.mape.to_f64().unwrap_or(f64::NAN),
                mape_flag,
                report.coverage95.to_f64().unwrap_or(f64::NAN),
                report.n_test
            )?;
        }
        Ok(())
    }
}
