//! Synthetic motif benchmark: seeded domains for every knowledge-base
//! regime, a pretrained backbone, and the ablation driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{init_arm, init_gate, ArmConfig, Fusion};
use crate::backbone::{pretrain_backbone, BackboneConfig, BackboneParams, PretrainConfig};
use crate::data::{generate_from_bank, make_pairs, split, MotifBank, Series, SplitSeries, SplitSpec, TimeSeriesPair, DEFAULT_PERIOD_RANGE};
use crate::error::{Error, Result};
use crate::eval::{check_grid_value, evaluate, fit_scalers, AblationAxis, AblationTable, EvalSettings, ScalerMap};
use crate::infer::{Engine, ForecastOptions, Forecaster};
use crate::retrieval::{DistanceMetric, KnowledgeBase, Regime};
use crate::train::{train_arm, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_series: usize,
    pub series_len: usize,
    pub bank_size: usize,
    pub noise_std: f64,
    pub split: SplitSpec,
    pub backbone: BackboneConfig,
    pub kb_stride: usize,
    pub test_stride: usize,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Amplitude and period factors of the distribution-shift sibling bank.
    pub shift_amplitude: f64,
    pub shift_period: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 7,
            n_series: 60,
            series_len: 4000,
            bank_size: 8,
            noise_std: 0.1,
            split: SplitSpec::ETT,
            backbone: BackboneConfig::default(),
            kb_stride: crate::data::DEFAULT_KB_STRIDE,
            test_stride: 1,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            shift_amplitude: 1.6,
            shift_period: 1.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Domain {
    pub bank: MotifBank,
    pub splits: Vec<SplitSeries>,
}

impl Domain {
    fn generate(bank: MotifBank, seed: u64, cfg: &BenchmarkConfig, tag: &str) -> Result<Self> {
        let series = generate_from_bank(&bank, seed, cfg.n_series, cfg.series_len, cfg.noise_std, tag);
        let splits = series.iter().map(|s| split(s, &cfg.split)).collect::<Result<_>>()?;
        Ok(Domain { bank, splits })
    }

    pub fn train_series(&self) -> impl Iterator<Item = &Series> {
        self.splits.iter().map(|s| &s.train)
    }

    pub fn train_pairs(&self, t: usize, l: usize, stride: usize) -> Vec<TimeSeriesPair> {
        self.train_series().flat_map(|s| make_pairs(s, t, l, stride)).collect()
    }
}

/// Data and frozen backbone shared by every run of the benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub in_domain: Domain,
    /// Sibling bank with altered amplitudes and periods.
    pub shifted: Domain,
    /// Independently drawn bank.
    pub cross: Domain,
    pub train_pairs: Vec<TimeSeriesPair>,
    pub scalers: ScalerMap,
    pub backbone: BackboneParams,
    pub pretrain_losses: Vec<f64>,
}

impl Benchmark {
    /// Generates the three domains and pretrains the backbone on the
    /// in-domain training pairs.
    pub fn generate(config: BenchmarkConfig) -> Result<Self> {
        config.backbone.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bank = MotifBank::random(&mut rng, config.bank_size, DEFAULT_PERIOD_RANGE);
        let cross_bank = MotifBank::random(&mut rng, config.bank_size, DEFAULT_PERIOD_RANGE);
        let shifted_bank = bank.perturbed(config.shift_amplitude, config.shift_period);
        let s = config.seed.wrapping_mul(1_000_003);
        let in_domain = Domain::generate(bank, s + 1, &config, "in")?;
        let shifted = Domain::generate(shifted_bank, s + 2, &config, "shift")?;
        let cross = Domain::generate(cross_bank, s + 3, &config, "cross")?;

        let (t, l) = (config.backbone.context_len, config.backbone.horizon_len);
        let train_pairs = in_domain.train_pairs(t, l, config.kb_stride);
        if train_pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "benchmark series too short for a single training pair".into(),
            ));
        }
        let scalers = fit_scalers(&in_domain.splits);
        let pre = pretrain_backbone(&train_pairs, config.backbone, &config.pretrain)?;
        Ok(Benchmark {
            config,
            in_domain,
            shifted,
            cross,
            train_pairs,
            scalers,
            backbone: pre.params,
            pretrain_losses: pre.epoch_losses,
        })
    }

    /// Test windows of the in-domain series at the configured stride.
    pub fn test_pairs(&self, horizon: usize) -> Vec<TimeSeriesPair> {
        let t = self.config.backbone.context_len;
        self.in_domain
            .splits
            .iter()
            .flat_map(|s| make_pairs(&s.test, t, horizon, self.config.test_stride))
            .collect()
    }

    pub fn kb(&self, regime: Regime, lookback: usize) -> Result<KnowledgeBase> {
        let (t, l, stride) = (
            self.config.backbone.context_len,
            self.config.backbone.horizon_len,
            self.config.kb_stride,
        );
        let build = |d: &Domain, r: Regime| {
            KnowledgeBase::build_with_lookback(&d.train_pairs(t, l, stride), &self.backbone, r, lookback)
        };
        match regime {
            Regime::InDomain => build(&self.in_domain, regime),
            Regime::DistributionShift => build(&self.shifted, regime),
            Regime::CrossDomain => build(&self.cross, regime),
            Regime::MultiDomain => {
                let parts = [
                    build(&self.in_domain, regime)?,
                    build(&self.shifted, regime)?,
                    build(&self.cross, regime)?,
                ];
                KnowledgeBase::merge(&[&parts[0], &parts[1], &parts[2]], regime)
            }
        }
    }

    pub fn arm_config(&self) -> ArmConfig {
        ArmConfig {
            k: self.config.train.k,
            dropout_p: self.config.train.dropout_p,
            seed: self.config.seed,
            ..ArmConfig::for_dims(self.config.backbone.dim, self.config.backbone.horizon_len)
        }
    }

    /// Trains a fresh fusion module ("arm" or "gate") against `kb`.
    pub fn train_fusion(&self, kb: &KnowledgeBase, kind: &str) -> Result<TrainOutcome> {
        let fusion = match kind {
            "arm" => Fusion::Arm(init_arm(self.arm_config())?),
            "gate" => Fusion::Gate(init_gate(self.arm_config())?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown fusion {other:?}; expected arm or gate"
                )))
            }
        };
        train_arm(&self.train_pairs, kb, &self.backbone, fusion, &self.config.train)
    }
}

/// Base point of an ablation; every row varies exactly one of these.
#[derive(Debug, Clone)]
pub struct AblationBase {
    pub regime: Regime,
    pub k: usize,
    pub lookback: usize,
    pub metric: DistanceMetric,
    pub horizon: usize,
    pub settings: EvalSettings,
}

impl AblationBase {
    pub fn for_benchmark(bench: &Benchmark) -> Self {
        AblationBase {
            regime: Regime::InDomain,
            k: bench.config.train.k,
            lookback: bench.config.backbone.context_len,
            metric: bench.config.train.metric,
            horizon: bench.config.backbone.horizon_len,
            settings: EvalSettings::default(),
        }
    }
}

/// One row per grid value; everything else is held at `base`. The fusion
/// module is trained once against the base knowledge base (and once more
/// for the gate on the fusion axis) and reused across rows.
pub fn ablate(
    axis: AblationAxis,
    grid: &[String],
    bench: &Benchmark,
    base: &AblationBase,
    trained_arm: Option<&Fusion>,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }
    let t = bench.config.backbone.context_len;
    for v in grid {
        check_grid_value(axis, v, t)?;
    }
    let base_kb = bench.kb(base.regime, base.lookback)?;
    let arm = match trained_arm {
        Some(f) => f.clone(),
        None => bench.train_fusion(&base_kb, "arm")?.fusion,
    };
    let test_pairs = bench.test_pairs(base.horizon);
    let mut rows = Vec::with_capacity(grid.len());
    for value in grid {
        let mut regime = base.regime;
        let mut k = base.k;
        let mut lookback = base.lookback;
        let mut metric = base.metric;
        let mut fusion = arm.clone();
        match axis {
            AblationAxis::KbRegime => regime = value.parse()?,
            AblationAxis::TopK => k = value.parse().expect("checked"),
            AblationAxis::Lookback => lookback = value.parse().expect("checked"),
            AblationAxis::Metric => metric = value.parse()?,
            AblationAxis::Fusion => {
                if value == "gate" {
                    fusion = bench.train_fusion(&base_kb, "gate")?.fusion;
                }
            }
        }
        let kb = if regime == base.regime && lookback == base.lookback {
            base_kb.clone()
        } else {
            bench.kb(regime, lookback)?
        };
        let engine = Engine {
            backbone: bench.backbone.clone(),
            fusion: Some(fusion),
        };
        let forecaster = Forecaster::new(
            &engine,
            &kb,
            ForecastOptions {
                k,
                metric,
                bypass_arm: false,
            },
        )?;
        let settings = EvalSettings {
            label: value.clone(),
            ..base.settings.clone()
        };
        let row = evaluate(&test_pairs, &forecaster, &bench.scalers, &settings)?;
        log::info!(
            "ablation {}={}: mse {:.6} (backbone {:.6})",
            axis.as_str(),
            value,
            row.metrics.mse,
            row.baseline.mse
        );
        rows.push(row);
    }
    Ok(AblationTable { axis, rows })
}
