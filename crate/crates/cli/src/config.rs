//! Run configuration: a TOML file with every knob, overridden by flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tsrag::backbone::{BackboneConfig, PretrainConfig};
use tsrag::benchmark::BenchmarkConfig;
use tsrag::codec::sha256_hex;
use tsrag::data::{SplitSpec, DEFAULT_KB_STRIDE};
use tsrag::retrieval::{DistanceMetric, Regime};
use tsrag::train::TrainConfig;
use tsrag::{Error, Result};

/// Synthetic motif corpus used by `ingest --synthetic` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_series: usize,
    pub series_len: usize,
    pub bank_size: usize,
    pub noise_std: f64,
    pub shift_amplitude: f64,
    pub shift_period: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        SyntheticConfig {
            n_series: b.n_series,
            series_len: b.series_len,
            bank_size: b.bank_size,
            noise_std: b.noise_std,
            shift_amplitude: b.shift_amplitude,
            shift_period: b.shift_period,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub split: SplitSpec,
    /// Window stride for knowledge-base and training pairs.
    pub kb_stride: usize,
    /// Window stride for evaluation pairs.
    pub test_stride: usize,
    pub k: usize,
    pub metric: DistanceMetric,
    /// Retrieval lookback; defaults to the context length.
    pub lookback: Option<usize>,
    pub regime: Regime,
    /// Forecast horizon; defaults to the backbone horizon (rolling beyond it).
    pub horizon: Option<usize>,
    /// `arm` or `gate`.
    pub fusion: String,
    pub allow_leakage: bool,
    pub bypass_arm: bool,
    /// Evaluate at most this many evenly spaced windows.
    pub window_limit: Option<usize>,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            split: SplitSpec::ETT,
            kb_stride: DEFAULT_KB_STRIDE,
            test_stride: 1,
            k: train.k,
            metric: train.metric,
            lookback: None,
            regime: Regime::InDomain,
            horizon: None,
            fusion: "arm".into(),
            allow_leakage: false,
            bypass_arm: false,
            window_limit: None,
            pretrain: PretrainConfig::default(),
            train,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub metric: Option<DistanceMetric>,
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub regime: Option<Regime>,
    pub allow_leakage: bool,
    pub bypass_arm: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("config {}: {}", path.display(), e.message())))
    }

    /// Applies flag overrides; a single seed or k drives every component.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.backbone.seed = seed;
            self.train.seed = seed;
        }
        if let Some(k) = o.k {
            self.k = k;
            self.train.k = k;
        }
        if let Some(m) = o.metric {
            self.metric = m;
            self.train.metric = m;
        }
        if o.lookback.is_some() {
            self.lookback = o.lookback;
        }
        if o.horizon.is_some() {
            self.horizon = o.horizon;
        }
        if let Some(r) = o.regime {
            self.regime = r;
        }
        self.allow_leakage |= o.allow_leakage;
        self.bypass_arm |= o.bypass_arm;
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.split.validate()?;
        self.metric.validate()?;
        if self.kb_stride == 0 || self.test_stride == 0 {
            return Err(Error::InvalidArgument("window strides must be ≥ 1".into()));
        }
        let lookback = self.lookback();
        if lookback == 0 || lookback > self.backbone.context_len {
            return Err(Error::InvalidArgument(format!(
                "lookback {lookback} outside 1..={}",
                self.backbone.context_len
            )));
        }
        if self.horizon == Some(0) {
            return Err(Error::InvalidArgument("horizon must be ≥ 1".into()));
        }
        if self.fusion != "arm" && self.fusion != "gate" {
            return Err(Error::InvalidArgument(format!(
                "fusion {:?}: expected arm or gate",
                self.fusion
            )));
        }
        Ok(())
    }

    pub fn lookback(&self) -> usize {
        self.lookback.unwrap_or(self.backbone.context_len)
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(self.backbone.horizon_len)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config is plain data"))
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        let s = &self.synthetic;
        BenchmarkConfig {
            seed: self.seed,
            n_series: s.n_series,
            series_len: s.series_len,
            bank_size: s.bank_size,
            noise_std: s.noise_std,
            split: self.split,
            backbone: self.backbone,
            kb_stride: self.kb_stride,
            test_stride: self.test_stride,
            pretrain: self.pretrain,
            train: self.train,
            shift_amplitude: s.shift_amplitude,
            shift_period: s.shift_period,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("k = 3\n[backbone]\ndim = 16\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.backbone.dim, 16);
        assert_eq!(c.backbone.context_len, 512);
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.lr, 3e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("kk = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.metric = DistanceMetric::Dtw { band: Some(8) };
        c.lookback = Some(128);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn flags_win() {
        let mut c = RunConfig::default();
        let before = c.fingerprint();
        c.apply(&Overrides {
            seed: Some(9),
            k: Some(4),
            metric: Some(DistanceMetric::Cosine),
            ..Overrides::default()
        });
        assert_eq!((c.seed, c.backbone.seed, c.train.seed), (9, 9, 9));
        assert_eq!((c.k, c.train.k), (4, 4));
        assert_eq!(c.train.metric, DistanceMetric::Cosine);
        assert_ne!(c.fingerprint(), before);
        c.lookback = Some(1000);
        assert!(c.validate().is_err());
    }
}
