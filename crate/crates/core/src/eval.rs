//! Metrics under per-series train-split scalers, evaluation reports,
//! ablation tables and dataset characteristics.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::arm::Fusion;
use crate::codec::sha256_hex;
use crate::data::{GlobalScaler, SplitSeries, TimeSeriesPair};
use crate::error::{ensure_len, Error, Result};
use crate::infer::{ForecastOptions, Forecaster};
use crate::retrieval::{leakage_check, DistanceMetric, Regime};
use crate::train::EngineCheckpoint;

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_metric_inputs(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_metric_inputs(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

fn check_metric_inputs(y: &[f64], y_hat: &[f64]) -> Result<()> {
    ensure_len("forecast length", y.len(), y_hat.len())?;
    if y.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one value".into()));
    }
    Ok(())
}

/// Scaler per series id, each fitted on that series' training segment.
pub type ScalerMap = HashMap<String, GlobalScaler>;

pub fn fit_scalers<'a>(splits: impl IntoIterator<Item = &'a SplitSeries>) -> ScalerMap {
    splits
        .into_iter()
        .map(|s| {
            let scaler = GlobalScaler::fit([s.train.values.as_slice()], format!("{}:train", s.train.id));
            (s.train.id.clone(), scaler)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

/// Scores `predict` on every pair after standardizing target and forecast
/// with the pair's series scaler. Per-window sums are reduced in pair order.
pub fn evaluate_with<F>(pairs: &[TimeSeriesPair], scalers: &ScalerMap, predict: F) -> Result<Metrics>
where
    F: Fn(&TimeSeriesPair) -> Result<Vec<f64>> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation windows".into()));
    }
    let per_window: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|p| {
            let scaler = scalers.get(&p.origin.series_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no scaler fitted for series {}", p.origin.series_id))
            })?;
            let forecast = predict(p)?;
            let y = scaler.transform(&p.horizon);
            let y_hat = scaler.transform(&forecast);
            Ok((mse(&y, &y_hat)?, mae(&y, &y_hat)?))
        })
        .collect::<Result<_>>()?;
    let n = per_window.len() as f64;
    let (s_mse, s_mae) = per_window
        .iter()
        .fold((0.0, 0.0), |(a, b), (m, e)| (a + m, b + e));
    let m = Metrics {
        mse: s_mse / n,
        mae: s_mae / n,
        n_windows: per_window.len(),
    };
    debug_assert!(m.mae * m.mae <= m.mse * (1.0 + 1e-12) + 1e-300);
    Ok(m)
}

/// Everything that identifies an evaluation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub backbone_hash: String,
    pub fusion: String,
    pub fusion_hash: Option<String>,
    pub kb_regime: Regime,
    pub k: usize,
    pub metric: String,
    pub lookback: usize,
    pub horizon: usize,
    pub bypass_arm: bool,
}

impl RunSummary {
    pub fn of(forecaster: &Forecaster<'_>, horizon: usize) -> Self {
        let engine = forecaster.engine;
        let fusion_hash = engine
            .fusion
            .as_ref()
            .map(|f| sha256_hex(&EngineCheckpoint::new(&engine.backbone, f.clone()).to_bytes()));
        RunSummary {
            backbone_hash: engine.backbone.hash(),
            fusion: engine.fusion.as_ref().map_or("none", Fusion::kind).to_string(),
            fusion_hash,
            kb_regime: forecaster.kb.meta.regime,
            k: forecaster.options.k,
            metric: forecaster.options.metric.name(),
            lookback: forecaster.kb.meta.lookback,
            horizon,
            bypass_arm: forecaster.options.bypass_arm,
        }
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("summary is plain data"))
    }

    /// True when `self` and `other` agree on every field outside `axis`.
    pub fn differs_only_in(&self, other: &RunSummary, axis: AblationAxis) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        for s in [&mut a, &mut b] {
            match axis {
                AblationAxis::KbRegime => s.kb_regime = Regime::InDomain,
                AblationAxis::TopK => s.k = 0,
                AblationAxis::Lookback => s.lookback = 0,
                AblationAxis::Metric => s.metric.clear(),
                AblationAxis::Fusion => {
                    s.fusion.clear();
                    s.fusion_hash = None;
                }
            }
        }
        a == b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub label: String,
    pub metrics: Metrics,
    /// Same windows through the backbone alone.
    pub baseline: Metrics,
    pub summary: RunSummary,
    pub fingerprint: String,
    pub fallback_windows: usize,
}

impl EvalRow {
    /// Relative MSE change against the backbone-only path, in percent.
    pub fn delta_mse_pct(&self) -> f64 {
        100.0 * (self.metrics.mse - self.baseline.mse) / self.baseline.mse.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalSettings {
    pub allow_leakage: bool,
    /// Evaluate an evenly spaced subset of at most this many windows.
    pub window_limit: Option<usize>,
    pub label: String,
}

/// Evenly spaced subset preserving order.
pub fn subsample<T: Clone>(items: &[T], limit: Option<usize>) -> Vec<T> {
    match limit {
        Some(n) if n < items.len() => (0..n).map(|i| items[i * items.len() / n].clone()).collect(),
        _ => items.to_vec(),
    }
}

/// Forecasts every test window (rolling when its horizon exceeds L) and
/// scores it, alongside the backbone-only path on the same windows.
pub fn evaluate(
    test_pairs: &[TimeSeriesPair],
    forecaster: &Forecaster<'_>,
    scalers: &ScalerMap,
    settings: &EvalSettings,
) -> Result<EvalRow> {
    let pairs = subsample(test_pairs, settings.window_limit);
    let horizon = pairs.first().map_or(0, |p| p.horizon.len());
    for p in &pairs {
        ensure_len("test horizon length", horizon, p.horizon.len())?;
    }
    let leaks = leakage_check(forecaster.kb, &pairs);
    if !leaks.is_clean() {
        if settings.allow_leakage {
            log::warn!(
                "{} knowledge-base entries overlap test windows; continuing as requested",
                leaks.leaking_entries().len()
            );
        } else {
            return Err(Error::Leakage(leaks.leaking_entries().len()));
        }
    }

    let run = |f: &Forecaster<'_>| {
        let fallbacks = std::sync::atomic::AtomicUsize::new(0);
        let metrics = evaluate_with(&pairs, scalers, |p| {
            let r = if horizon == f.horizon_len() {
                f.forecast(&p.context)?
            } else {
                f.rolling_forecast(&p.context, horizon)?
            };
            if r.fallback {
                fallbacks.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            Ok(r.forecast)
        })?;
        Ok::<_, Error>((metrics, fallbacks.into_inner()))
    };
    let (metrics, fallback_windows) = run(forecaster)?;
    let baseline = if forecaster.options.bypass_arm || forecaster.engine.fusion.is_none() {
        metrics
    } else {
        let bypass = Forecaster {
            options: ForecastOptions {
                bypass_arm: true,
                ..forecaster.options
            },
            ..*forecaster
        };
        run(&bypass)?.0
    };
    let summary = RunSummary::of(forecaster, horizon);
    Ok(EvalRow {
        label: settings.label.clone(),
        metrics,
        baseline,
        fingerprint: summary.fingerprint(),
        summary,
        fallback_windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    KbRegime,
    TopK,
    Lookback,
    Metric,
    Fusion,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::KbRegime => "kb_regime",
            AblationAxis::TopK => "top_k",
            AblationAxis::Lookback => "lookback",
            AblationAxis::Metric => "metric",
            AblationAxis::Fusion => "fusion",
        }
    }

    /// Grid used when none is given.
    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::KbRegime => &["in-domain", "distribution-shift", "cross-domain", "multi-domain"],
            AblationAxis::TopK => &["0", "1", "5", "10"],
            AblationAxis::Lookback => &["64", "128", "256", "512"],
            AblationAxis::Metric => &["euclidean", "cosine", "dtw"],
            AblationAxis::Fusion => &["arm", "gate"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "kb_regime" | "regime" => Ok(AblationAxis::KbRegime),
            "top_k" | "k" => Ok(AblationAxis::TopK),
            "lookback" => Ok(AblationAxis::Lookback),
            "metric" => Ok(AblationAxis::Metric),
            "fusion" => Ok(AblationAxis::Fusion),
            _ => Err(Error::InvalidArgument(format!("unknown ablation axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<EvalRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,mse,mae,n_windows,backbone_mse,backbone_mae,delta_mse_pct,fingerprint\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                self.axis.as_str(),
                r.label,
                r.metrics.mse,
                r.metrics.mae,
                r.metrics.n_windows,
                r.baseline.mse,
                r.baseline.mae,
                r.delta_mse_pct(),
                r.fingerprint
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<20} {:>10} {:>10} {:>8} {:>12} {:>9}  {}\n",
            self.axis.as_str(),
            "mse",
            "mae",
            "windows",
            "backbone_mse",
            "delta%",
            "fingerprint"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>10.6} {:>10.6} {:>8} {:>12.6} {:>9.3}  {}",
                r.label,
                r.metrics.mse,
                r.metrics.mae,
                r.metrics.n_windows,
                r.baseline.mse,
                r.delta_mse_pct(),
                &r.fingerprint[..16]
            );
        }
        s
    }
}

/// Parses and checks one grid value for `axis`.
pub fn check_grid_value(axis: AblationAxis, value: &str, context_len: usize) -> Result<()> {
    let bad = |why: &str| Err(Error::InvalidArgument(format!("invalid {} value {value:?}: {why}", axis.as_str())));
    match axis {
        AblationAxis::KbRegime => value.parse::<Regime>().map(|_| ()),
        AblationAxis::TopK => value.parse::<usize>().map(|_| ()).or_else(|_| bad("not a count")),
        AblationAxis::Lookback => match value.parse::<usize>() {
            Ok(m) if m >= 1 && m <= context_len => Ok(()),
            _ => bad(&format!("must be in 1..={context_len}")),
        },
        AblationAxis::Metric => value.parse::<DistanceMetric>().and_then(|m| m.validate()),
        AblationAxis::Fusion => match value {
            "arm" | "gate" => Ok(()),
            _ => bad("expected arm or gate"),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Characteristics {
    pub autocorr_lag1: f64,
    pub noise_ratio: f64,
    pub volatility: f64,
    pub stationarity: f64,
    /// Set when the series is constant and the autocorrelation is undefined.
    pub degenerate: bool,
}

const CHAR_EPS: f64 = 1e-8;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Lag-1 autocorrelation, var(Δx)/var(x), std/mean and var(Δx).
pub fn characteristics(x: &[f64]) -> Result<Characteristics> {
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "characteristics need at least 3 points, got {}",
            x.len()
        )));
    }
    let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let var_x = variance(x);
    let var_d = variance(&diffs);
    let m = mean(x);
    let (autocorr_lag1, degenerate) = match pearson_corr(&x[..x.len() - 1], &x[1..]) {
        Ok(r) => (r, false),
        Err(_) => (0.0, true),
    };
    let guarded_mean = if m.abs() < CHAR_EPS { CHAR_EPS.copysign(m) } else { m };
    Ok(Characteristics {
        autocorr_lag1,
        noise_ratio: var_d / var_x.max(CHAR_EPS),
        volatility: var_x.sqrt() / guarded_mean,
        stationarity: var_d,
        degenerate,
    })
}

/// Per-series characteristics averaged over a dataset.
pub fn dataset_characteristics<'a>(series: impl IntoIterator<Item = &'a [f64]>) -> Result<Characteristics> {
    let all: Vec<Characteristics> = series.into_iter().map(characteristics).collect::<Result<_>>()?;
    if all.is_empty() {
        return Err(Error::InvalidArgument("no series to analyse".into()));
    }
    let n = all.len() as f64;
    Ok(Characteristics {
        autocorr_lag1: all.iter().map(|c| c.autocorr_lag1).sum::<f64>() / n,
        noise_ratio: all.iter().map(|c| c.noise_ratio).sum::<f64>() / n,
        volatility: all.iter().map(|c| c.volatility).sum::<f64>() / n,
        stationarity: all.iter().map(|c| c.stationarity).sum::<f64>() / n,
        degenerate: all.iter().any(|c| c.degenerate),
    })
}

/// Sample Pearson correlation.
pub fn pearson_corr(xs: &[f64], ys: &[f64]) -> Result<f64> {
    ensure_len("pearson inputs", xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("pearson correlation needs ≥ 2 points".into()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("pearson correlation of a zero-variance input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Origin, Series};
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn metric_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn mae_squared_bounded_by_mse(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..50)) {
            let (y, yh): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let a = mae(&y, &yh).unwrap();
            let m = mse(&y, &yh).unwrap();
            prop_assert!(a * a <= m * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn characteristics_shift_invariant(v in proptest::collection::vec(-10.0f64..10.0, 5..60), c in -100.0f64..100.0) {
            let a = characteristics(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = characteristics(&shifted).unwrap();
            if !a.degenerate && !b.degenerate {
                prop_assert!((a.autocorr_lag1 - b.autocorr_lag1).abs() < 1e-9);
            }
            prop_assert!((a.noise_ratio - b.noise_ratio).abs() <= 1e-9 * a.noise_ratio.abs().max(1.0));
            prop_assert!((a.stationarity - b.stationarity).abs() <= 1e-9 * a.stationarity.abs().max(1.0));
        }
    }

    #[test]
    fn oracle_forecast_scores_zero() {
        let s = Series::new("s", (0..200).map(|i| (i as f64 * 0.3).sin() * 4.0 + 1.0).collect(), "t");
        let sp = crate::data::split(&s, &crate::data::SplitSpec::ETT).unwrap();
        let scalers = fit_scalers([&sp]);
        let pairs = crate::data::make_pairs(&sp.test, 16, 4, 1);
        let m = evaluate_with(&pairs, &scalers, |p| Ok(p.horizon.clone())).unwrap();
        assert_eq!((m.mse, m.mae, m.n_windows), (0.0, 0.0, pairs.len()));
        let stray = TimeSeriesPair::new(
            vec![0.0; 16],
            vec![0.0; 4],
            Origin {
                series_id: "other".into(),
                start: 0,
            },
            "t",
        );
        assert!(evaluate_with(&[stray], &scalers, |p| Ok(p.horizon.clone())).is_err());
    }

    #[test]
    fn characteristics_examples() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = characteristics(&noise).unwrap();
        assert!(c.autocorr_lag1.abs() < 0.05);
        assert!((c.noise_ratio - 2.0).abs() < 0.1);

        let sine: Vec<f64> = (0..2400)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 24.0).sin())
            .collect();
        assert!(characteristics(&sine).unwrap().autocorr_lag1 > 0.9);

        let flat = characteristics(&[3.0; 10]).unwrap();
        assert!(flat.degenerate);
        assert_eq!((flat.autocorr_lag1, flat.volatility), (0.0, 0.0));
        assert!(characteristics(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_corr(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_corr(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            pearson_corr(&xs, &[1.0; 4]).unwrap_err().category(),
            crate::ErrorCategory::Numeric
        );
        assert!(pearson_corr(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn grid_values_are_checked() {
        assert!(check_grid_value(AblationAxis::Lookback, "128", 512).is_ok());
        assert!(check_grid_value(AblationAxis::Lookback, "1024", 512).is_err());
        assert!(check_grid_value(AblationAxis::Metric, "dtw", 512).is_ok());
        assert!(check_grid_value(AblationAxis::Metric, "manhattan", 512).is_err());
        assert!(check_grid_value(AblationAxis::KbRegime, "sideways", 512).is_err());
        assert!(check_grid_value(AblationAxis::Fusion, "gate", 512).is_ok());
        assert_eq!("top-k".parse::<AblationAxis>().unwrap(), AblationAxis::TopK);
    }

    #[test]
    fn subsample_is_even_and_ordered() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(subsample(&v, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(subsample(&v, Some(20)), v);
        assert_eq!(subsample(&v, None), v);
    }
}
