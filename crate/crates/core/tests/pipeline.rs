//! End-to-end behaviour of training, inference and the ablation harness on
//! small synthetic benchmarks.

use tsrag::arm::{init_arm, ArmConfig, Fusion};
use tsrag::backbone::{BackboneConfig, BackboneParams, PretrainConfig};
use tsrag::benchmark::{ablate, AblationBase, Benchmark, BenchmarkConfig};
use tsrag::data::{generate_motif_corpus, make_pairs, TimeSeriesPair};
use tsrag::eval::{evaluate, AblationAxis, EvalSettings};
use tsrag::infer::{measure_latency, Engine, ForecastOptions, Forecaster};
use tsrag::retrieval::{KnowledgeBase, Regime};
use tsrag::train::{train_arm, TrainConfig};
use tsrag::ErrorCategory;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        context_len: 64,
        horizon_len: 16,
        patch_len: 16,
        dim: 16,
        seed: 1,
    }
}

fn small_bench() -> Benchmark {
    Benchmark::generate(BenchmarkConfig {
        n_series: 6,
        series_len: 700,
        backbone: small_backbone(),
        kb_stride: 16,
        test_stride: 4,
        pretrain: PretrainConfig {
            epochs: 5,
            ..PretrainConfig::default()
        },
        train: TrainConfig {
            steps: 40,
            batch_size: 8,
            k: 5,
            eval_every: 0,
            ..TrainConfig::default()
        },
        ..BenchmarkConfig::default()
    })
    .unwrap()
}

#[test]
fn training_loss_drops_by_a_third() {
    // Default dimensions; 2k pairs, a 1k-entry knowledge base drawn from
    // them, k = 10, 500 steps.
    let config = BackboneConfig::default();
    let (t, l) = (config.context_len, config.horizon_len);
    let corpus = generate_motif_corpus(21, 20, t + l + 1010, 6, 0.05);
    let pairs: Vec<TimeSeriesPair> = corpus.iter().flat_map(|s| make_pairs(s, t, l, 10)).collect();
    let pairs = &pairs[..2000];
    let pre = tsrag::backbone::pretrain_backbone(pairs, config, &PretrainConfig::default()).unwrap();
    let kb_pairs: Vec<TimeSeriesPair> = pairs.iter().step_by(2).cloned().collect();
    let kb = KnowledgeBase::build(&kb_pairs, &pre.params, Regime::InDomain).unwrap();
    assert_eq!(kb.len(), 1000);
    let train = TrainConfig {
        steps: 500,
        k: 10,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let init = Fusion::Arm(init_arm(ArmConfig::for_dims(config.dim, l)).unwrap());
    let out = train_arm(pairs, &kb, &pre.params, init, &train).unwrap();
    let first = out.eval_curve.first().unwrap().loss;
    let last = out.eval_curve.last().unwrap().loss;
    assert!(last <= 0.7 * first, "loss {first} -> {last}");
}

#[test]
fn benchmark_runs_are_reproducible() {
    let a = small_bench();
    let b = small_bench();
    assert_eq!(a.backbone.to_bytes(), b.backbone.to_bytes());
    let kb = a.kb(Regime::InDomain, 64).unwrap();
    assert_eq!(kb.to_bytes(), b.kb(Regime::InDomain, 64).unwrap().to_bytes());
    let fa = a.train_fusion(&kb, "arm").unwrap();
    let fb = b.train_fusion(&kb, "arm").unwrap();
    assert_eq!(fa.fusion, fb.fusion);
    assert_eq!(fa.loss_curve, fb.loss_curve);
}

#[test]
fn top_k_ablation_rows_are_isolated() {
    let bench = small_bench();
    let base = AblationBase::for_benchmark(&bench);
    let grid: Vec<String> = AblationAxis::TopK.default_grid();
    let table = ablate(AblationAxis::TopK, &grid, &bench, &base, None).unwrap();
    assert_eq!(table.rows.len(), 4);
    let k0 = &table.rows[0];
    assert_eq!(k0.fallback_windows, k0.metrics.n_windows);
    for r in &table.rows[1..] {
        assert_eq!(r.fallback_windows, 0);
    }
    for a in &table.rows {
        for b in &table.rows {
            assert!(a.summary.differs_only_in(&b.summary, AblationAxis::TopK));
        }
        let m = &a.metrics;
        assert!(m.mae * m.mae <= m.mse);
    }
    assert!(!table.rows[0].summary.differs_only_in(&table.rows[1].summary, AblationAxis::Metric));
    assert_eq!(table.to_csv().lines().count(), 5);
    assert_eq!(table.to_text().lines().count(), 5);
}

#[test]
fn every_axis_produces_one_row_per_value() {
    let bench = small_bench();
    let mut base = AblationBase::for_benchmark(&bench);
    base.settings.window_limit = Some(40);
    let arm = bench.train_fusion(&bench.kb(Regime::InDomain, 64).unwrap(), "arm").unwrap().fusion;
    let grids: [(AblationAxis, &[&str]); 4] = [
        (AblationAxis::KbRegime, &["in-domain", "distribution-shift", "cross-domain", "multi-domain"]),
        (AblationAxis::Lookback, &["16", "32", "64"]),
        (AblationAxis::Metric, &["euclidean", "cosine", "dtw:8"]),
        (AblationAxis::Fusion, &["arm", "gate"]),
    ];
    for (axis, grid) in grids {
        let grid: Vec<String> = grid.iter().map(|s| s.to_string()).collect();
        let table = ablate(axis, &grid, &bench, &base, Some(&arm)).unwrap();
        assert_eq!(table.rows.len(), grid.len());
        for (r, v) in table.rows.iter().zip(&grid) {
            assert_eq!(&r.label, v);
            assert_eq!(r.metrics.n_windows, 40);
            assert!(r.summary.differs_only_in(&table.rows[0].summary, axis));
        }
        let fingerprints: std::collections::HashSet<_> = table.rows.iter().map(|r| &r.fingerprint).collect();
        assert_eq!(fingerprints.len(), grid.len(), "{axis:?}");
    }
    let bad = ablate(AblationAxis::Lookback, &["999".into()], &bench, &base, Some(&arm)).unwrap_err();
    assert_eq!(bad.category(), ErrorCategory::Format);
    assert!(ablate(AblationAxis::TopK, &[], &bench, &base, Some(&arm)).is_err());
}

#[test]
fn leaking_knowledge_base_is_refused() {
    let bench = small_bench();
    let test = bench.test_pairs(16);
    let leaky = KnowledgeBase::build(&test[..10], &bench.backbone, Regime::InDomain).unwrap();
    let engine = Engine::backbone_only(bench.backbone.clone());
    let f = Forecaster::new(&engine, &leaky, ForecastOptions::default()).unwrap();
    let err = evaluate(&test, &f, &bench.scalers, &EvalSettings::default()).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Leakage);
    let allowed = EvalSettings {
        allow_leakage: true,
        ..EvalSettings::default()
    };
    let row = evaluate(&test, &f, &bench.scalers, &allowed).unwrap();
    // Backbone-only engine: the delta column is exactly zero.
    assert_eq!(row.metrics, row.baseline);
    assert_eq!(row.delta_mse_pct(), 0.0);
}

#[test]
fn retrieval_latency_grows_with_the_knowledge_base() {
    let mut bb = BackboneParams::init(small_backbone()).unwrap();
    bb.frozen = true;
    let pairs: Vec<TimeSeriesPair> = generate_motif_corpus(4, 20, 1080, 8, 0.1)
        .iter()
        .flat_map(|s| make_pairs(s, 64, 16, 1))
        .collect();
    let big = KnowledgeBase::build(&pairs, &bb, Regime::InDomain).unwrap();
    let small = KnowledgeBase::build(&pairs[..pairs.len() / 10], &bb, Regime::InDomain).unwrap();
    // Retrieval only runs when a fusion module is present.
    let engine = Engine {
        backbone: bb,
        fusion: Some(Fusion::Arm(init_arm(ArmConfig::for_dims(16, 16)).unwrap())),
    };
    let queries: Vec<&[f64]> = pairs.iter().step_by(997).map(|p| p.context.as_slice()).collect();
    let time = |kb: &KnowledgeBase| {
        let f = Forecaster::new(&engine, kb, ForecastOptions::default()).unwrap();
        measure_latency(&f, &queries, 3, 1).unwrap().retrieval_ms
    };
    let (t_small, t_big) = (time(&small), time(&big));
    assert!(t_big >= 0.5 * t_small, "small {t_small} ms, big {t_big} ms");
}
