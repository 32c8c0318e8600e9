//! Univariate time-series data model, CSV ingestion, splitting, and
//! standardization.
//!
//! Timestamps are plain reals in native units (fractional months, years,
//! ...). CSV files use the two-column schema `t,y`; the `t` column may also
//! hold ISO `YYYY-MM` months, which are mapped to consecutive integers with
//! the first month at 0.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{real, Scalar};

/// Errors from series construction and I/O.
#[derive(Debug, Error)]
pub enum TimeSeriesError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: expected header `t,y`, found `{found}`")]
    BadHeader { path: String, found: String },
    #[error("{path}: empty body (header only)")]
    EmptyBody { path: String },
    #[error("{path}: malformed row at line {line}: {reason}")]
    MalformedRow {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("{path}: timestamps not strictly increasing at line {line}")]
    UnsortedTimestamps { path: String, line: u64 },
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("n_train {n_train} out of range 1..={len}")]
    SplitOutOfRange { n_train: usize, len: usize },
    #[error("series too short: need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("constant series: values have zero variance, no forecast is possible")]
    ZeroVariance,
}

/// Ordered `(timestamp, value)` observations.
///
/// Invariants (enforced at construction): timestamps strictly increasing,
/// both columns the same nonzero length, every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries<T: Scalar> {
    timestamps: Vec<T>,
    values: Vec<T>,
    name: String,
}

impl<T: Scalar> TimeSeries<T> {
    pub fn new(
        timestamps: Vec<T>,
        values: Vec<T>,
        name: impl Into<String>,
    ) -> Result<Self, TimeSeriesError> {
        if timestamps.is_empty() {
            return Err(TimeSeriesError::InvalidSeries(
                "series must contain at least one point".into(),
            ));
        }
        if timestamps.len() != values.len() {
            return Err(TimeSeriesError::InvalidSeries(format!(
                "timestamps ({}) and values ({}) differ in length",
                timestamps.len(),
                values.len()
            )));
        }
        if timestamps
            .iter()
            .chain(values.iter())
            .any(|v| !v.is_finite_scalar())
        {
            return Err(TimeSeriesError::InvalidSeries(
                "series contains a non-finite entry".into(),
            ));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TimeSeriesError::InvalidSeries(
                "timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            timestamps,
            values,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[T] {
        &self.timestamps
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Median gap between consecutive timestamps. Positive by construction;
    /// zero only for a single-point series.
    pub fn median_spacing(&self) -> T {
        if self.len() < 2 {
            return T::zero();
        }
        let mut gaps: Vec<T> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
        let mid = gaps.len() / 2;
        if gaps.len() % 2 == 1 {
            gaps[mid]
        } else {
            (gaps[mid - 1] + gaps[mid]) / real(2.0)
        }
    }

    /// Mean of the values.
    pub fn mean(&self) -> T {
        let n = real::<T>(self.len() as f64);
        self.values.iter().fold(T::zero(), |acc, &v| acc + v) / n
    }

    /// Unbiased sample variance of the values (n−1 divisor).
    pub fn variance(&self) -> T {
        if self.len() < 2 {
            return T::zero();
        }
        let mean = self.mean();
        let ss = self
            .values
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean));
        ss / real((self.len() - 1) as f64)
    }
}

/// Affine transform mapping a native-unit series to standardized units and
/// back: `y' = (y − y_mean)/y_std`, `x' = (x − x_origin)/x_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingParams<T: Scalar> {
    pub y_mean: T,
    pub y_std: T,
    pub x_origin: T,
    pub x_scale: T,
}

impl<T: Scalar> ScalingParams<T> {
    /// Identity transform (useful when data are already standardized).
    pub fn identity() -> Self {
        Self {
            y_mean: T::zero(),
            y_std: T::one(),
            x_origin: T::zero(),
            x_scale: T::one(),
        }
    }

    pub fn to_standard_x(&self, x: T) -> T {
        (x - self.x_origin) / self.x_scale
    }

    pub fn to_native_x(&self, x: T) -> T {
        x * self.x_scale + self.x_origin
    }

    pub fn to_standard_y(&self, y: T) -> T {
        (y - self.y_mean) / self.y_std
    }

    pub fn to_native_y(&self, y: T) -> T {
        y * self.y_std + self.y_mean
    }

    /// Maps a standardized standard deviation back to native units.
    pub fn to_native_sd(&self, sd: T) -> T {
        sd * self.y_std
    }
}

/// A chronological train/test partition of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSeries<T: Scalar> {
    pub train: TimeSeries<T>,
    /// May be empty when `n_train` equals the source length.
    pub test: Option<TimeSeries<T>>,
}

impl<T: Scalar> SplitSeries<T> {
    pub fn test_len(&self) -> usize {
        self.test.as_ref().map_or(0, TimeSeries::len)
    }
}

/// Splits off the first `n_train` points for training, keeping order.
pub fn split<T: Scalar>(
    series: &TimeSeries<T>,
    n_train: usize,
) -> Result<SplitSeries<T>, TimeSeriesError> {
    if n_train < 1 || n_train > series.len() {
        return Err(TimeSeriesError::SplitOutOfRange {
            n_train,
            len: series.len(),
        });
    }
    let train = TimeSeries::new(
        series.timestamps[..n_train].to_vec(),
        series.values[..n_train].to_vec(),
        series.name.clone(),
    )?;
    let test = if n_train == series.len() {
        None
    } else {
        Some(TimeSeries::new(
            series.timestamps[n_train..].to_vec(),
            series.values[n_train..].to_vec(),
            series.name.clone(),
        )?)
    };
    Ok(SplitSeries { train, test })
}

/// Standardizes values to sample mean 0 / sample std 1 and timestamps to
/// start at 0 with unit median spacing.
pub fn standardize<T: Scalar>(
    series: &TimeSeries<T>,
) -> Result<(TimeSeries<T>, ScalingParams<T>), TimeSeriesError> {
    if series.len() < 2 {
        return Err(TimeSeriesError::TooShort {
            need: 2,
            got: series.len(),
        });
    }
    let variance = series.variance();
    if variance <= T::zero() {
        return Err(TimeSeriesError::ZeroVariance);
    }
    let scaling = ScalingParams {
        y_mean: series.mean(),
        y_std: variance.sqrt(),
        x_origin: series.timestamps[0],
        x_scale: series.median_spacing(),
    };
    let standardized = TimeSeries::new(
        series
            .timestamps
            .iter()
            .map(|&x| scaling.to_standard_x(x))
            .collect(),
        series
            .values
            .iter()
            .map(|&y| scaling.to_standard_y(y))
            .collect(),
        series.name.clone(),
    )?;
    Ok((standardized, scaling))
}

/// Inverse of [`standardize`].
pub fn unstandardize<T: Scalar>(
    series: &TimeSeries<T>,
    scaling: &ScalingParams<T>,
) -> Result<TimeSeries<T>, TimeSeriesError> {
    TimeSeries::new(
        series
            .timestamps
            .iter()
            .map(|&x| scaling.to_native_x(x))
            .collect(),
        series
            .values
            .iter()
            .map(|&y| scaling.to_native_y(y))
            .collect(),
        series.name.clone(),
    )
}

/// Parses `YYYY-MM` into a flat month index, or `None` when the field is not
/// an ISO month.
fn parse_month(field: &str) -> Option<i64> {
    let bytes = field.as_bytes();
    if bytes.len() != 7 || bytes[4] != b'-' {
        return None;
    }
    if !bytes[..4].iter().all(u8::is_ascii_digit) || !bytes[5..].iter().all(u8::is_ascii_digit) {
        return None;
    }
    let year: i64 = field[..4].parse().ok()?;
    let month: i64 = field[5..].parse().ok()?;
    if !(1..=12).contains(&month) {
        return None;
    }
    Some(year * 12 + (month - 1))
}

/// Reads a `t,y` CSV file. `t` entries must be either all ISO months or all
/// plain reals; months become consecutive integers with the first month at 0.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>) -> Result<TimeSeries<T>, TimeSeriesError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let io_err = |source| TimeSeriesError::Io {
        path: path_str.clone(),
        source,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(source),
            other => TimeSeriesError::MalformedRow {
                path: path_str.clone(),
                line: 1,
                reason: format!("{other:?}"),
            },
        })?;

    {
        let headers = reader.headers().map_err(|e| TimeSeriesError::MalformedRow {
            path: path_str.clone(),
            line: 1,
            reason: e.to_string(),
        })?;
        let normalized: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();
        if normalized != ["t", "y"] {
            return Err(TimeSeriesError::BadHeader {
                path: path_str,
                found: headers.iter().collect::<Vec<_>>().join(","),
            });
        }
    }

    let mut timestamps: Vec<f64> = Vec::new();
    let mut values: Vec<T> = Vec::new();
    let mut month_mode: Option<bool> = None;
    let mut first_month: i64 = 0;

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            TimeSeriesError::MalformedRow {
                path: path_str.clone(),
                line,
                reason: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        let malformed = |reason: String| TimeSeriesError::MalformedRow {
            path: path_str.clone(),
            line,
            reason,
        };

        if record.len() != 2 {
            return Err(malformed(format!("expected 2 fields, got {}", record.len())));
        }
        let t_field = record[0].trim();
        let y_field = record[1].trim();

        let t = match parse_month(t_field) {
            Some(index) => {
                if *month_mode.get_or_insert(true) != true {
                    return Err(malformed(format!(
                        "ISO month `{t_field}` in a file of numeric timestamps"
                    )));
                }
                if timestamps.is_empty() {
                    first_month = index;
                }
                (index - first_month) as f64
            }
            None => {
                if *month_mode.get_or_insert(false) != false {
                    return Err(malformed(format!(
                        "numeric timestamp `{t_field}` in a file of ISO months"
                    )));
                }
                t_field
                    .parse::<f64>()
                    .map_err(|_| malformed(format!("timestamp `{t_field}` is not numeric")))?
            }
        };
        let y: f64 = y_field
            .parse()
            .map_err(|_| malformed(format!("value `{y_field}` is not numeric")))?;
        if !t.is_finite() || !y.is_finite() {
            return Err(malformed("non-finite entry".into()));
        }
        if let Some(&last) = timestamps.last() {
            if t <= last {
                return Err(TimeSeriesError::UnsortedTimestamps {
                    path: path_str,
                    line,
                });
            }
        }
        timestamps.push(t);
        values.push(real(y));
    }

    if timestamps.is_empty() {
        return Err(TimeSeriesError::EmptyBody { path: path_str });
    }

    let name = path
        .file_stem()
        .map_or_else(|| "series".to_string(), |s| s.to_string_lossy().into_owned());
    TimeSeries::new(timestamps.into_iter().map(real).collect(), values, name)
}

/// Formats a scalar with 17 significant digits so `f64` round-trips exactly.
pub fn format_real<T: Scalar>(x: T) -> String {
    format!("{:.16e}", x.to_f64().expect("finite scalar"))
}

/// Renders a series in the `t,y` CSV schema.
pub fn to_csv_string<T: Scalar>(series: &TimeSeries<T>) -> String {
    let mut out = String::from("t,y\n");
    for (&t, &y) in series.timestamps().iter().zip(series.values()) {
        let _ = writeln!(out, "{},{}", format_real(t), format_real(y));
    }
    out
}

/// Writes a series to a `t,y` CSV file.
pub fn write_csv<T: Scalar>(
    series: &TimeSeries<T>,
    path: impl AsRef<Path>,
) -> Result<(), TimeSeriesError> {
    std::fs::write(path.as_ref(), to_csv_string(series)).map_err(|source| TimeSeriesError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}
