//! Zero-shot forecasting, rolling multi-step forecasting and latency
//! measurement.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::arm::{ForwardMode, Fusion};
use crate::backbone::BackboneParams;
use crate::data::{denormalize, zscore, WindowStats};
use crate::error::{ensure_len, Error, Result};
use crate::retrieval::{top_k, DistanceMetric, KnowledgeBase, QueryKey};
use crate::train::EngineCheckpoint;

/// A frozen backbone with an optional trained fusion module.
#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    pub backbone: BackboneParams,
    pub fusion: Option<Fusion>,
}

impl Engine {
    pub fn backbone_only(backbone: BackboneParams) -> Self {
        Engine {
            backbone,
            fusion: None,
        }
    }

    /// Binds a checkpoint to its backbone after checking dimensions and hash.
    pub fn from_checkpoint(backbone: BackboneParams, checkpoint: EngineCheckpoint) -> Result<Self> {
        checkpoint.check_backbone(&backbone)?;
        Ok(Engine {
            backbone,
            fusion: Some(checkpoint.fusion),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForecastOptions {
    pub k: usize,
    pub metric: DistanceMetric,
    /// Skip retrieval and fusion entirely: the plain backbone forecast.
    pub bypass_arm: bool,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        ForecastOptions {
            k: 10,
            metric: DistanceMetric::Euclidean,
            bypass_arm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundTrace {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// Mixing weights over [query, retrieved...].
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub retrieval_ms: f64,
    pub forward_ms: f64,
}

impl Timings {
    pub fn total_ms(&self) -> f64 {
        self.retrieval_ms + self.forward_ms
    }

    fn add(&mut self, other: Timings) {
        self.retrieval_ms += other.retrieval_ms;
        self.forward_ms += other.forward_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastResult {
    /// Raw-space forecast.
    pub forecast: Vec<f64>,
    pub traces: Vec<RoundTrace>,
    pub timings: Timings,
    /// No neighbours were available (k = 0 or empty knowledge base).
    pub fallback: bool,
}

impl ForecastResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,value\n");
        for (i, v) in self.forecast.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, v));
        }
        s
    }

    pub fn trace_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "fallback": self.fallback,
            "timings_ms": {
                "retrieval": self.timings.retrieval_ms,
                "forward": self.timings.forward_ms,
                "total": self.timings.total_ms(),
            },
            "rounds": self.traces,
        }))
        .expect("trace is plain data")
    }
}

/// An engine bound to a knowledge base. Compatibility is checked once here
/// rather than on every query.
#[derive(Debug, Clone, Copy)]
pub struct Forecaster<'a> {
    pub engine: &'a Engine,
    pub kb: &'a KnowledgeBase,
    pub options: ForecastOptions,
}

impl<'a> Forecaster<'a> {
    pub fn new(engine: &'a Engine, kb: &'a KnowledgeBase, options: ForecastOptions) -> Result<Self> {
        options.metric.validate()?;
        kb.check_encoder(&engine.backbone)?;
        if let Some(f) = &engine.fusion {
            ensure_len("fusion embedding dim", engine.backbone.config.dim, f.config().dim)?;
            ensure_len(
                "fusion horizon length",
                engine.backbone.config.horizon_len,
                f.config().horizon_len,
            )?;
        }
        Ok(Forecaster { engine, kb, options })
    }

    pub fn horizon_len(&self) -> usize {
        self.engine.backbone.config.horizon_len
    }

    pub fn context_len(&self) -> usize {
        self.engine.backbone.config.context_len
    }

    /// Forecast in normalized space; returns (ŷ normalized, trace, timings, fallback).
    pub fn forecast_normalized(&self, context: &[f64]) -> Result<(Vec<f64>, RoundTrace, Timings, bool)> {
        let bb = &self.engine.backbone;
        let fallback = self.options.k == 0 || self.kb.is_empty();
        let t0 = Instant::now();
        let query = bb.encode(context)?;
        let use_fusion = self.engine.fusion.as_ref().filter(|_| !self.options.bypass_arm);
        let retrieved = match use_fusion {
            Some(_) if !fallback => {
                let key = if self.kb.meta.lookback == bb.config.context_len {
                    query.clone()
                } else {
                    bb.encode_lookback(context, self.kb.meta.lookback)?
                };
                Some(top_k(
                    self.kb,
                    QueryKey {
                        embedding: &key,
                        context: Some(context),
                    },
                    self.options.k,
                    self.options.metric,
                )?)
            }
            _ => None,
        };
        let t1 = Instant::now();
        let (e_final, alpha) = match use_fusion {
            Some(fusion) => {
                let horizons = retrieved.as_ref().map_or_else(Vec::new, |r| r.horizons(self.kb));
                let trace = fusion.forward(&query, &horizons, ForwardMode::Eval)?;
                (trace.e_final().to_vec(), trace.weights())
            }
            None => (query, vec![1.0]),
        };
        let out = bb.project(&e_final)?;
        let t2 = Instant::now();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite forecast".into()));
        }
        let trace = RoundTrace {
            indices: retrieved.as_ref().map_or_else(Vec::new, |r| r.indices()),
            distances: retrieved.as_ref().map_or_else(Vec::new, |r| r.distances()),
            alpha,
        };
        let timings = Timings {
            retrieval_ms: (t1 - t0).as_secs_f64() * 1e3,
            forward_ms: (t2 - t1).as_secs_f64() * 1e3,
        };
        Ok((out, trace, timings, fallback))
    }

    /// Single-shot L-step forecast of a raw context window.
    pub fn forecast(&self, context: &[f64]) -> Result<ForecastResult> {
        ensure_len("query context length", self.context_len(), context.len())?;
        let stats = WindowStats::of(context);
        let (out, trace, timings, fallback) = self.forecast_normalized(&zscore(context, stats))?;
        Ok(ForecastResult {
            forecast: denormalize(&out, stats),
            traces: vec![trace],
            timings,
            fallback,
        })
    }

    /// Forecasts `horizon` steps in rounds of L: each round's forecast is
    /// appended to the window, the oldest L points dropped, and retrieval
    /// is repeated on the partly synthetic window.
    pub fn rolling_forecast(&self, context: &[f64], horizon: usize) -> Result<ForecastResult> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("rolling horizon must be ≥ 1".into()));
        }
        let t = self.context_len();
        let mut window = context.to_vec();
        let mut result = ForecastResult {
            forecast: Vec::with_capacity(horizon),
            traces: Vec::new(),
            timings: Timings::default(),
            fallback: false,
        };
        while result.forecast.len() < horizon {
            let round = self.forecast(&window)?;
            window.extend_from_slice(&round.forecast);
            window.drain(..window.len() - t);
            result.forecast.extend_from_slice(&round.forecast);
            result.traces.extend(round.traces);
            result.timings.add(round.timings);
            result.fallback |= round.fallback;
        }
        result.forecast.truncate(horizon);
        Ok(result)
    }

    /// Forecasts many windows in parallel; output order matches input order.
    pub fn forecast_batch(&self, contexts: &[&[f64]], horizon: usize) -> Result<Vec<ForecastResult>> {
        contexts
            .par_iter()
            .map(|c| {
                if horizon == self.horizon_len() {
                    self.forecast(c)
                } else {
                    self.rolling_forecast(c, horizon)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyReport {
    pub retrieval_ms: f64,
    pub forward_ms: f64,
    pub total_ms: f64,
    pub iterations: usize,
    pub kb_size: usize,
}

/// Mean wall-clock cost per forecast. `warmup` passes over the queries are
/// run first and discarded; then every query is forecast `repetitions` times.
pub fn measure_latency(
    forecaster: &Forecaster<'_>,
    queries: &[&[f64]],
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if queries.is_empty() || repetitions == 0 {
        return Err(Error::InvalidArgument(
            "latency measurement needs ≥ 1 query and ≥ 1 repetition".into(),
        ));
    }
    for _ in 0..warmup {
        for q in queries {
            forecaster.forecast(q)?;
        }
    }
    let mut total = Timings::default();
    let mut n = 0usize;
    for _ in 0..repetitions {
        for q in queries {
            total.add(forecaster.forecast(q)?.timings);
            n += 1;
        }
    }
    let retrieval_ms = total.retrieval_ms / n as f64;
    let forward_ms = total.forward_ms / n as f64;
    Ok(LatencyReport {
        retrieval_ms,
        forward_ms,
        total_ms: retrieval_ms + forward_ms,
        iterations: n,
        kb_size: forecaster.kb.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{init_arm, ArmConfig};
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_motif_corpus, make_pairs, TimeSeriesPair};
    use crate::retrieval::Regime;

    fn setup() -> (Vec<TimeSeriesPair>, KnowledgeBase, Engine) {
        let corpus = generate_motif_corpus(2, 4, 300, 4, 0.05);
        let pairs: Vec<TimeSeriesPair> = corpus.iter().flat_map(|s| make_pairs(s, 32, 8, 8)).collect();
        let mut bb = BackboneParams::init(BackboneConfig {
            context_len: 32,
            horizon_len: 8,
            patch_len: 8,
            dim: 8,
            seed: 3,
        })
        .unwrap();
        bb.frozen = true;
        let kb = KnowledgeBase::build(&pairs, &bb, Regime::InDomain).unwrap();
        let arm = init_arm(ArmConfig {
            heads: 2,
            ..ArmConfig::for_dims(8, 8)
        })
        .unwrap();
        (pairs, kb, Engine {
            backbone: bb,
            fusion: Some(Fusion::Arm(arm)),
        })
    }

    fn opts(k: usize) -> ForecastOptions {
        ForecastOptions {
            k,
            ..ForecastOptions::default()
        }
    }

    #[test]
    fn self_match_is_retrieved_first() {
        let (pairs, kb, engine) = setup();
        let f = Forecaster::new(&engine, &kb, opts(1)).unwrap();
        let r = f.forecast(&pairs[5].context).unwrap();
        assert_eq!(r.traces[0].indices, vec![5]);
        assert_eq!(r.traces[0].distances, vec![0.0]);
        assert_eq!(kb.entries[5].horizon, pairs[5].normalized_horizon());
        assert!((r.traces[0].alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(!r.fallback);
    }

    #[test]
    fn k_zero_and_bypass_paths() {
        let (pairs, kb, engine) = setup();
        let ctx = &pairs[3].context;
        let r0 = Forecaster::new(&engine, &kb, opts(0)).unwrap().forecast(ctx).unwrap();
        assert!(r0.fallback);
        assert_eq!(r0.traces[0].alpha, vec![1.0]);
        assert!(r0.traces[0].indices.is_empty());

        let stats = WindowStats::of(ctx);
        let norm = zscore(ctx, stats);
        let q = engine.backbone.encode(&norm).unwrap();
        let Some(Fusion::Arm(arm)) = &engine.fusion else { unreachable!() };
        let t = crate::arm::arm_forward(arm, &q, &[], ForwardMode::Eval).unwrap();
        let expected = denormalize(&engine.backbone.project(&t.e_final).unwrap(), stats);
        assert_eq!(r0.forecast, expected);

        let bypass = ForecastOptions {
            bypass_arm: true,
            ..opts(10)
        };
        let rb = Forecaster::new(&engine, &kb, bypass).unwrap().forecast(ctx).unwrap();
        let backbone = denormalize(&engine.backbone.forecast_normalized(&norm).unwrap(), stats);
        assert_eq!(rb.forecast, backbone);
    }

    #[test]
    fn affine_query_retrieves_same_neighbours() {
        let (pairs, kb, engine) = setup();
        let f = Forecaster::new(&engine, &kb, opts(5)).unwrap();
        let ctx = &pairs[7].context;
        let scaled: Vec<f64> = ctx.iter().map(|x| 3.5 * x - 2.0).collect();
        let a = f.forecast(ctx).unwrap();
        let b = f.forecast(&scaled).unwrap();
        assert_eq!(a.traces[0].indices, b.traces[0].indices);
        for (x, y) in a.forecast.iter().zip(&b.forecast) {
            assert!(((y + 2.0) / 3.5 - x).abs() < 1e-8);
        }
    }

    #[test]
    fn rolling_rounds() {
        let (pairs, kb, engine) = setup();
        let f = Forecaster::new(&engine, &kb, opts(4)).unwrap();
        let ctx = &pairs[2].context;
        let single = f.forecast(ctx).unwrap();
        let one = f.rolling_forecast(ctx, 8).unwrap();
        assert_eq!(single.forecast, one.forecast);
        assert_eq!(single.traces, one.traces);

        let two = f.rolling_forecast(ctx, 16).unwrap();
        assert_eq!(two.traces.len(), 2);
        assert_eq!(&two.forecast[..8], &single.forecast[..]);
        let mut window = ctx[8..].to_vec();
        window.extend_from_slice(&single.forecast);
        assert_eq!(f.forecast(&window).unwrap().forecast, two.forecast[8..]);

        let odd = f.rolling_forecast(ctx, 9).unwrap();
        assert_eq!(odd.forecast.len(), 9);
        assert_eq!(odd.traces.len(), 2);
        assert!(f.rolling_forecast(ctx, 0).is_err());
    }

    #[test]
    fn inference_is_read_only_and_deterministic() {
        let (pairs, kb, engine) = setup();
        let kb_bytes = kb.to_bytes();
        let engine_before = engine.clone();
        let f = Forecaster::new(&engine, &kb, opts(3)).unwrap();
        let ctxs: Vec<&[f64]> = pairs.iter().take(10).map(|p| p.context.as_slice()).collect();
        let a = f.forecast_batch(&ctxs, 8).unwrap();
        let b = f.forecast_batch(&ctxs, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.forecast, y.forecast);
        }
        assert_eq!(kb.to_bytes(), kb_bytes);
        assert_eq!(engine, engine_before);
    }

    #[test]
    fn latency_single_measurement() {
        let (pairs, kb, engine) = setup();
        let f = Forecaster::new(&engine, &kb, opts(3)).unwrap();
        let r = measure_latency(&f, &[&pairs[0].context], 1, 0).unwrap();
        assert_eq!(r.iterations, 1);
        assert!((r.total_ms - r.retrieval_ms - r.forward_ms).abs() < 1e-9);
        assert!(measure_latency(&f, &[], 1, 0).is_err());
    }

    #[test]
    fn output_formats() {
        let (pairs, kb, engine) = setup();
        let r = Forecaster::new(&engine, &kb, opts(2))
            .unwrap()
            .forecast(&pairs[0].context)
            .unwrap();
        assert!(r.to_csv().starts_with("step,value\n1,"));
        let v: serde_json::Value = serde_json::from_str(&r.trace_json()).unwrap();
        assert_eq!(v["rounds"][0]["indices"].as_array().unwrap().len(), 2);
    }
}
