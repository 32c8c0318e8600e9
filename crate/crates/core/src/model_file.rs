//! JSON model-file envelope shared by GP and ARIMA fits.
//!
//! The file embeds the native-unit training arrays; no factorization cache
//! is persisted — the Cholesky state is rebuilt on load. HMC fits carry
//! their posterior draws (unconstrained, with the transform constants) so a
//! reloaded model reproduces chain-averaged forecasts bit for bit.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arima::{ArimaError, ArimaModel, ArimaOrder};
use crate::gp::{GpError, GpModel};
use crate::inference::{
    split_diagnostics, ChainDiagnostics, HmcChain, InferenceError, ParamTransform,
};
use crate::kernels::{KernelError, NoiseParam, SmKernelParams};
use crate::scalar::Scalar;
use crate::timeseries::{TimeSeries, TimeSeriesError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed model file {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported model file version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("inconsistent model file: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Arima(#[from] ArimaError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Series(#[from] TimeSeriesError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSection<T> {
    t: Vec<T>,
    y: Vec<T>,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelSection<T> {
    weights: Vec<T>,
    frequencies: Vec<T>,
    scales: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalingSection<T> {
    y_mean: T,
    y_std: T,
    x_origin: T,
    x_scale: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainSection<T> {
    q: usize,
    f_nyq: T,
    n_chains: usize,
    n_samples: usize,
    accept_rate: T,
    divergences: usize,
    /// Unconstrained draws, chain-major, so reloads are bit-exact.
    draws: Vec<Vec<T>>,
    log_posterior: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model_type")]
enum ModelFile<T> {
    #[serde(rename = "gp")]
    Gp {
        version: u32,
        fit_method: String,
        seed: u64,
        train: TrainSection<T>,
        kernel: KernelSection<T>,
        noise_variance: T,
        scaling: ScalingSection<T>,
        jitter_used: T,
        #[serde(skip_serializing_if = "Option::is_none")]
        chain: Option<ChainSection<T>>,
    },
    #[serde(rename = "arima")]
    Arima {
        version: u32,
        fit_method: String,
        seed: u64,
        train: TrainSection<T>,
        order: OrderSection,
        ar_coeffs: Vec<T>,
        ma_coeffs: Vec<T>,
        intercept: T,
        innovation_variance: T,
        aicc: T,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct OrderSection {
    p: usize,
    d: usize,
    q: usize,
}

/// A model reloaded from disk, ready to forecast.
#[derive(Debug)]
pub enum LoadedModel<T: Scalar> {
    Gp {
        model: GpModel<T>,
        /// Present for HMC fits; forecasts then average over the chain.
        chain: Option<HmcChain<T>>,
        fit_method: String,
        seed: u64,
    },
    Arima {
        model: ArimaModel<T>,
        fit_method: String,
        seed: u64,
    },
}

impl<T: Scalar> LoadedModel<T> {
    pub fn fit_method(&self) -> &str {
        match self {
            Self::Gp { fit_method, .. } | Self::Arima { fit_method, .. } => fit_method,
        }
    }

    pub fn train(&self) -> TimeSeries<T> {
        match self {
            Self::Gp { model, .. } => {
                TimeSeries::new(model.train_t().to_vec(), model.train_y().to_vec(), "train")
                    .expect("persisted training data is valid")
            }
            Self::Arima { model, .. } => model.train().clone(),
        }
    }
}

fn train_section<T: Scalar>(t: &[T], y: &[T], name: &str) -> TrainSection<T> {
    TrainSection {
        t: t.to_vec(),
        y: y.to_vec(),
        name: name.to_string(),
    }
}

/// Serializes a GP fit (optionally with its HMC chain) to JSON text.
pub fn gp_to_json<T>(
    model: &GpModel<T>,
    fit_method: &str,
    seed: u64,
    chain: Option<&HmcChain<T>>,
) -> Result<String, ModelFileError>
where
    T: Scalar + Serialize,
{
    let chain_section = match chain {
        None => None,
        Some(chain) => {
            let transform = chain
                .transform
                .ok_or_else(|| ModelFileError::Inconsistent("chain lacks a transform".into()))?;
            Some(ChainSection {
                q: transform.q,
                f_nyq: transform.f_nyq,
                n_chains: chain.n_chains,
                n_samples: chain.n_samples,
                accept_rate: chain.accept_rate,
                divergences: chain.diagnostics.divergences,
                draws: chain.draws.iter().map(|d| d.iter().copied().collect()).collect(),
                log_posterior: chain.log_posterior.clone(),
            })
        }
    };
    let file = ModelFile::Gp {
        version: FORMAT_VERSION,
        fit_method: fit_method.to_string(),
        seed,
        train: train_section(model.train_t(), model.train_y(), "train"),
        kernel: KernelSection {
            weights: model.params().weights().to_vec(),
            frequencies: model.params().frequencies().to_vec(),
            scales: model.params().scales().to_vec(),
        },
        noise_variance: model.noise().variance(),
        scaling: ScalingSection {
            y_mean: model.scaling().y_mean,
            y_std: model.scaling().y_std,
            x_origin: model.scaling().x_origin,
            x_scale: model.scaling().x_scale,
        },
        jitter_used: model.jitter_used(),
        chain: chain_section,
    };
    serde_json::to_string_pretty(&file).map_err(|source| ModelFileError::Json {
        path: "<memory>".into(),
        source,
    })
}

/// Serializes an ARIMA fit to JSON text.
pub fn arima_to_json<T>(
    model: &ArimaModel<T>,
    fit_method: &str,
    seed: u64,
) -> Result<String, ModelFileError>
where
    T: Scalar + Serialize,
{
    let train = model.train();
    let file = ModelFile::Arima {
        version: FORMAT_VERSION,
        fit_method: fit_method.to_string(),
        seed,
        train: train_section(train.timestamps(), train.values(), train.name()),
        order: OrderSection {
            p: model.order.p,
            d: model.order.d,
            q: model.order.q,
        },
        ar_coeffs: model.ar_coeffs.clone(),
        ma_coeffs: model.ma_coeffs.clone(),
        intercept: model.intercept,
        innovation_variance: model.innovation_variance,
        aicc: model.aicc,
    };
    serde_json::to_string_pretty(&file).map_err(|source| ModelFileError::Json {
        path: "<memory>".into(),
        source,
    })
}

pub fn save_gp<T>(
    path: impl AsRef<Path>,
    model: &GpModel<T>,
    fit_method: &str,
    seed: u64,
    chain: Option<&HmcChain<T>>,
) -> Result<(), ModelFileError>
where
    T: Scalar + Serialize,
{
    let json = gp_to_json(model, fit_method, seed, chain)?;
    std::fs::write(path.as_ref(), json).map_err(|source| ModelFileError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

pub fn save_arima<T>(
    path: impl AsRef<Path>,
    model: &ArimaModel<T>,
    fit_method: &str,
    seed: u64,
) -> Result<(), ModelFileError>
where
    T: Scalar + Serialize,
{
    let json = arima_to_json(model, fit_method, seed)?;
    std::fs::write(path.as_ref(), json).map_err(|source| ModelFileError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

/// Loads either model kind, rebuilding factorizations and chain diagnostics.
pub fn load_model<T>(path: impl AsRef<Path>) -> Result<LoadedModel<T>, ModelFileError>
where
    T: Scalar + Serialize + DeserializeOwned,
{
    let path_str = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path.as_ref()).map_err(|source| ModelFileError::Io {
        path: path_str.clone(),
        source,
    })?;
    let file: ModelFile<T> =
        serde_json::from_str(&text).map_err(|source| ModelFileError::Json {
            path: path_str,
            source,
        })?;

    match file {
        ModelFile::Gp {
            version,
            fit_method,
            seed,
            train,
            kernel,
            noise_variance,
            chain,
            ..
        } => {
            if version != FORMAT_VERSION {
                return Err(ModelFileError::Version { found: version });
            }
            let series = TimeSeries::new(train.t, train.y, train.name)?;
            let params =
                SmKernelParams::new(kernel.weights, kernel.frequencies, kernel.scales)?;
            let noise = NoiseParam::new(noise_variance)?;
            let model = GpModel::build(&series, params, noise)?;

            let chain = match chain {
                None => None,
                Some(section) => {
                    let dim = 3 * section.q + 1;
                    if section.draws.len() != section.n_chains * section.n_samples {
                        return Err(ModelFileError::Inconsistent(format!(
                            "chain stores {} draws for {} chains × {} samples",
                            section.draws.len(),
                            section.n_chains,
                            section.n_samples
                        )));
                    }
                    let draws: Vec<nalgebra::DVector<T>> = section
                        .draws
                        .into_iter()
                        .map(|d| {
                            if d.len() != dim {
                                Err(ModelFileError::Inconsistent(format!(
                                    "draw has {} coordinates, expected {dim}",
                                    d.len()
                                )))
                            } else {
                                Ok(nalgebra::DVector::from_vec(d))
                            }
                        })
                        .collect::<Result<_, _>>()?;
                    let chunks: Vec<Vec<nalgebra::DVector<T>>> = draws
                        .chunks(section.n_samples)
                        .map(|c| c.to_vec())
                        .collect();
                    let (split_rhat, ess) = split_diagnostics(&chunks);
                    Some(HmcChain {
                        draws,
                        log_posterior: section.log_posterior,
                        n_chains: section.n_chains,
                        n_samples: section.n_samples,
                        accept_rate: section.accept_rate,
                        diagnostics: ChainDiagnostics {
                            split_rhat,
                            ess,
                            divergences: section.divergences,
                            warnings: Vec::new(),
                        },
                        transform: Some(ParamTransform {
                            q: section.q,
                            f_nyq: section.f_nyq,
                        }),
                    })
                }
            };
            Ok(LoadedModel::Gp {
                model,
                chain,
                fit_method,
                seed,
            })
        }
        ModelFile::Arima {
            version,
            fit_method,
            seed,
            train,
            order,
            ar_coeffs,
            ma_coeffs,
            intercept,
            innovation_variance,
            aicc,
        } => {
            if version != FORMAT_VERSION {
                return Err(ModelFileError::Version { found: version });
            }
            let series = TimeSeries::new(train.t, train.y, train.name)?;
            let order = ArimaOrder::new(order.p, order.d, order.q)?;
            let model = ArimaModel::from_parts(
                &series,
                order,
                ar_coeffs,
                ma_coeffs,
                intercept,
                innovation_variance,
                aicc,
            )?;
            Ok(LoadedModel::Arima {
                model,
                fit_method,
                seed,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::{fit_arima, forecast_arima};
    use crate::gp::sample_prior;
    use crate::inference::{hmc_sample, predictive_from_chain, HmcConfig};
    use crate::gp::IntervalMode;

    fn synthetic_train(n: usize, seed: u64) -> TimeSeries<f64> {
        let p = SmKernelParams::new(vec![1.0], vec![0.2], vec![0.05]).unwrap();
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ys = sample_prior(&p, NoiseParam::new(0.01).unwrap(), &xs, seed).unwrap();
        TimeSeries::new(xs, ys, "synthetic").unwrap()
    }

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("specmix-model-{tag}-{}.json", std::process::id()))
    }

    #[test]
    fn gp_round_trip_reproduces_predictions() {
        let train = synthetic_train(14, 8);
        let params = SmKernelParams::new(vec![0.9], vec![0.21], vec![0.06]).unwrap();
        let noise = NoiseParam::new(0.02).unwrap();
        let model = GpModel::build(&train, params, noise).unwrap();
        let query = [14.0, 15.0, 16.0];
        let direct = model.predict(&query).unwrap();

        let path = temp_path("gp");
        save_gp(&path, &model, "map", 42, None).unwrap();
        let loaded = load_model::<f64>(&path).unwrap();
        let LoadedModel::Gp { model: reloaded, chain, fit_method, seed } = loaded else {
            panic!("expected gp model");
        };
        assert!(chain.is_none());
        assert_eq!(fit_method, "map");
        assert_eq!(seed, 42);
        let redone = reloaded.predict(&query).unwrap();
        assert_eq!(direct.mean, redone.mean);
        assert_eq!(direct.sd, redone.sd);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn hmc_chain_round_trip_is_bit_exact() {
        let train = synthetic_train(12, 3);
        let config = HmcConfig {
            n_warmup: 40,
            n_samples: 30,
            n_chains: 2,
            seed: 9,
            ..HmcConfig::default()
        };
        let chain = hmc_sample(&train, 1, &config).unwrap();
        let query = [12.0, 13.0];
        let direct =
            predictive_from_chain(&chain, &train, &query, IntervalMode::Observation).unwrap();

        // Representative kernel: best log-posterior draw.
        let best = chain
            .log_posterior
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let (params, noise) = chain.constrained(best).unwrap();
        let model = GpModel::build(&train, params, noise).unwrap();

        let path = temp_path("hmc");
        save_gp(&path, &model, "hmc", 9, Some(&chain)).unwrap();
        let loaded = load_model::<f64>(&path).unwrap();
        let LoadedModel::Gp { chain: Some(reloaded_chain), .. } = loaded else {
            panic!("expected chain");
        };
        let redone =
            predictive_from_chain(&reloaded_chain, &train, &query, IntervalMode::Observation)
                .unwrap();
        assert_eq!(direct.mean, redone.mean);
        assert_eq!(direct.sd, redone.sd);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn arima_round_trip_reproduces_forecasts() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut y = 0.0;
        let values: Vec<f64> = (0..120)
            .map(|_| {
                y = 1.0 + 0.6 * y + f64::standard_normal(&mut rng);
                y
            })
            .skip(20)
            .collect();
        let ts: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
        let train = TimeSeries::new(ts, values, "ar").unwrap();
        let model = fit_arima(&train, ArimaOrder::new(1, 0, 1).unwrap()).unwrap();
        let direct = forecast_arima(&model, 4).unwrap();

        let path = temp_path("arima");
        save_arima(&path, &model, "arima", 7).unwrap();
        let loaded = load_model::<f64>(&path).unwrap();
        let LoadedModel::Arima { model: reloaded, .. } = loaded else {
            panic!("expected arima model");
        };
        let redone = forecast_arima(&reloaded, 4).unwrap();
        assert_eq!(direct.mean, redone.mean);
        assert_eq!(direct.sd, redone.sd);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn corrupt_and_missing_files_error_cleanly() {
        assert!(matches!(
            load_model::<f64>("/nonexistent/specmix-model.json").unwrap_err(),
            ModelFileError::Io { .. }
        ));
        let path = temp_path("corrupt");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_model::<f64>(&path).unwrap_err(),
            ModelFileError::Json { .. }
        ));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let train = synthetic_train(10, 2);
        let params = SmKernelParams::new(vec![1.0], vec![0.1], vec![0.1]).unwrap();
        let model = GpModel::build(&train, params, NoiseParam::new(0.1).unwrap()).unwrap();
        let json = gp_to_json(&model, "map", 1, None).unwrap();
        let bumped = json.replace("\"version\": 1", "\"version\": 99");
        let path = temp_path("version");
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_model::<f64>(&path).unwrap_err(),
            ModelFileError::Version { found: 99 }
        ));
        std::fs::remove_file(path).ok();
    }
}
