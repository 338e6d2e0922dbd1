//! `tsrag` command-line front end.

mod config;
mod store;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsrag::arm::{init_arm, init_gate, ArmConfig, Fusion};
use tsrag::backbone::{pretrain_backbone, BackboneParams};
use tsrag::benchmark::{ablate, AblationBase, Benchmark};
use tsrag::codec::write_file;
use tsrag::data::{generate_motif_corpus, load_csv, load_csv_columns, make_pairs, split, Series, SplitSeries, TimeSeriesPair};
use tsrag::eval::{dataset_characteristics, characteristics, evaluate, fit_scalers, AblationAxis, EvalSettings};
use tsrag::infer::{Engine, ForecastOptions, Forecaster};
use tsrag::retrieval::{DistanceMetric, KnowledgeBase, Regime};
use tsrag::train::{train_arm, EngineCheckpoint};
use tsrag::{Error, Result};

use config::{Overrides, RunConfig};
use store::SeriesStore;

#[derive(Parser)]
#[command(name = "tsrag", version, about = "Retrieval-augmented time-series forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of retrieved neighbours.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// euclidean, cosine, dtw or dtw:<band>.
    #[arg(long, global = true)]
    metric: Option<DistanceMetric>,
    /// Retrieval lookback (e.g. 64, 128, 256, 512).
    #[arg(long, global = true)]
    lookback: Option<usize>,
    /// Forecast horizon; beyond the backbone horizon forecasting rolls.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// in-domain, distribution-shift, cross-domain or multi-domain.
    #[arg(long, global = true)]
    regime: Option<Regime>,
    /// Evaluate even when the knowledge base overlaps the test windows.
    #[arg(long, global = true)]
    allow_leakage: bool,
    /// Use the backbone alone, without retrieval or fusion.
    #[arg(long, global = true)]
    bypass_arm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Read CSV columns (or generate a synthetic corpus) into a series store.
    Ingest {
        #[arg(long = "csv")]
        csv: Vec<PathBuf>,
        /// Column to read; all value columns when omitted.
        #[arg(long)]
        column: Option<String>,
        /// Generate the synthetic motif corpus described by the config.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the backbone on the training split of a store.
    PretrainBackbone {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Build a knowledge base from the training split of a store.
    BuildKb {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion module against a knowledge base.
    TrainArm {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Forecast the continuation of the last context window of a CSV column.
    Forecast {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Engine checkpoint; without it the backbone forecasts alone.
        #[arg(long)]
        engine: Option<PathBuf>,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON sidecar with retrieved indices, distances and weights.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score the test split of a store.
    Evaluate {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        engine: Option<PathBuf>,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep one axis on the synthetic benchmark.
    Ablate {
        /// kb_regime, top_k, lookback, metric or fusion.
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated grid; the axis default when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Characteristics of every series in a store.
    Analyze {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let message = e.to_string().replace('\n', " ");
            eprintln!("error category={category} message={message:?}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TSRAG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("TSRAG_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let c = &cli.common;
    let mut config = RunConfig::load(c.config.as_deref())?;
    config.apply(&Overrides {
        seed: c.seed,
        k: c.k,
        metric: c.metric,
        lookback: c.lookback,
        horizon: c.horizon,
        regime: c.regime,
        allow_leakage: c.allow_leakage,
        bypass_arm: c.bypass_arm,
    });
    config.validate()?;
    println!("fingerprint={}", config.fingerprint());

    match cli.command {
        Command::Ingest {
            csv,
            column,
            synthetic,
            out,
        } => ingest(&config, &csv, column.as_deref(), synthetic, &out),
        Command::PretrainBackbone { store, out, loss_csv } => {
            pretrain(&config, &store, &out, loss_csv.as_deref())
        }
        Command::BuildKb { store, backbone, out } => build_kb(&config, &store, &backbone, &out),
        Command::TrainArm {
            store,
            kb,
            backbone,
            out,
            loss_csv,
        } => train(&config, &store, &kb, &backbone, &out, loss_csv.as_deref()),
        Command::Forecast {
            backbone,
            kb,
            engine,
            query,
            column,
            out,
            trace,
        } => forecast(
            &config,
            &backbone,
            &kb,
            engine.as_deref(),
            &query,
            column.as_deref(),
            out.as_deref(),
            trace.as_deref(),
        ),
        Command::Evaluate {
            backbone,
            kb,
            engine,
            store,
            report,
        } => evaluate_cmd(&config, &backbone, &kb, engine.as_deref(), &store, report.as_deref()),
        Command::Ablate { axis, grid, out } => ablate_cmd(&config, axis, grid, out.as_deref()),
        Command::Analyze { store, out } => analyze(&store, out.as_deref()),
    }
}

fn ingest(config: &RunConfig, csv: &[PathBuf], column: Option<&str>, synthetic: bool, out: &Path) -> Result<()> {
    if csv.is_empty() && !synthetic {
        return Err(Error::InvalidArgument("ingest needs --csv files or --synthetic".into()));
    }
    let mut series: Vec<Series> = Vec::new();
    for path in csv {
        let loaded = match column {
            Some(col) => vec![load_csv(path, col)?],
            None => load_csv_columns(path)?,
        };
        for l in loaded {
            println!(
                "series {} points={} dropped_rows={}",
                l.series.id,
                l.series.len(),
                l.dropped_rows
            );
            series.push(l.series);
        }
    }
    if synthetic {
        let s = &config.synthetic;
        let generated = generate_motif_corpus(config.seed, s.n_series, s.series_len, s.bank_size, s.noise_std);
        println!("synthetic series={} points_each={}", generated.len(), s.series_len);
        series.extend(generated);
    }
    let store = SeriesStore { series };
    store.save(out)?;
    println!("wrote {} ({} series)", out.display(), store.series.len());
    Ok(())
}

fn splits(config: &RunConfig, store: &SeriesStore) -> Result<Vec<SplitSeries>> {
    store.series.iter().map(|s| split(s, &config.split)).collect()
}

fn train_pairs(config: &RunConfig, splits: &[SplitSeries]) -> Result<Vec<TimeSeriesPair>> {
    let b = &config.backbone;
    let pairs: Vec<TimeSeriesPair> = splits
        .iter()
        .flat_map(|s| make_pairs(&s.train, b.context_len, b.horizon_len, config.kb_stride))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no training windows: every training split is shorter than {} points",
            b.context_len + b.horizon_len
        )));
    }
    Ok(pairs)
}

fn pretrain(config: &RunConfig, store: &Path, out: &Path, loss_csv: Option<&Path>) -> Result<()> {
    let store = SeriesStore::load(store)?;
    let pairs = train_pairs(config, &splits(config, &store)?)?;
    let outcome = pretrain_backbone(&pairs, config.backbone, &config.pretrain)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    if let Some(p) = loss_csv {
        write_file(p, csv.as_bytes())?;
    }
    outcome.params.save(out)?;
    println!(
        "pairs={} loss {:.6} -> {:.6}",
        pairs.len(),
        outcome.epoch_losses[0],
        outcome.epoch_losses.last().unwrap()
    );
    println!("backbone_hash={}", outcome.params.hash());
    Ok(())
}

fn load_backbone(config: &RunConfig, path: &Path) -> Result<BackboneParams> {
    let bytes = tsrag::codec::read_file(path)?;
    let mut bb = BackboneParams::from_bytes_expecting(&bytes, &config.backbone)?;
    bb.frozen = true;
    Ok(bb)
}

fn build_kb(config: &RunConfig, store: &Path, backbone: &Path, out: &Path) -> Result<()> {
    let store = SeriesStore::load(store)?;
    let bb = load_backbone(config, backbone)?;
    let pairs = train_pairs(config, &splits(config, &store)?)?;
    let kb = KnowledgeBase::build_with_lookback(&pairs, &bb, config.regime, config.lookback())?;
    kb.save(out)?;
    println!(
        "entries={} regime={} lookback={} encoder_hash={}",
        kb.len(),
        kb.meta.regime,
        kb.meta.lookback,
        kb.meta.encoder_hash
    );
    Ok(())
}

fn train(
    config: &RunConfig,
    store: &Path,
    kb: &Path,
    backbone: &Path,
    out: &Path,
    loss_csv: Option<&Path>,
) -> Result<()> {
    let store = SeriesStore::load(store)?;
    let bb = load_backbone(config, backbone)?;
    let kb = KnowledgeBase::load(kb, &bb, false)?;
    let pairs = train_pairs(config, &splits(config, &store)?)?;
    let arm_config = ArmConfig {
        k: config.train.k,
        dropout_p: config.train.dropout_p,
        seed: config.seed,
        ..ArmConfig::for_dims(bb.config.dim, bb.config.horizon_len)
    };
    let fusion = if config.fusion == "gate" {
        Fusion::Gate(init_gate(arm_config)?)
    } else {
        Fusion::Arm(init_arm(arm_config)?)
    };
    let outcome = train_arm(&pairs, &kb, &bb, fusion, &config.train)?;
    if let Some(p) = loss_csv {
        write_file(p, outcome.loss_curve_csv().as_bytes())?;
    }
    let ckpt = EngineCheckpoint::new(&bb, outcome.fusion);
    ckpt.save(out)?;
    let first = outcome.loss_curve.first().map_or(f64::NAN, |p| p.loss);
    let last = outcome.loss_curve.last().map_or(f64::NAN, |p| p.loss);
    println!(
        "fusion={} steps={} pairs={} batch_loss {first:.6} -> {last:.6}",
        ckpt.fusion.kind(),
        outcome.loss_curve.len(),
        pairs.len()
    );
    for p in &outcome.eval_curve {
        println!("eval_loss step={} loss={:.6}", p.step, p.loss);
    }
    Ok(())
}

fn load_engine(config: &RunConfig, backbone: &Path, engine: Option<&Path>) -> Result<Engine> {
    let bb = load_backbone(config, backbone)?;
    match engine {
        Some(p) => Engine::from_checkpoint(bb, EngineCheckpoint::load(p)?),
        None => Ok(Engine::backbone_only(bb)),
    }
}

fn options(config: &RunConfig) -> ForecastOptions {
    ForecastOptions {
        k: config.k,
        metric: config.metric,
        bypass_arm: config.bypass_arm,
    }
}

#[allow(clippy::too_many_arguments)]
fn forecast(
    config: &RunConfig,
    backbone: &Path,
    kb: &Path,
    engine: Option<&Path>,
    query: &Path,
    column: Option<&str>,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let engine = load_engine(config, backbone, engine)?;
    let kb = KnowledgeBase::load(kb, &engine.backbone, false)?;
    let series = match column {
        Some(col) => load_csv(query, col)?.series,
        None => load_csv_columns(query)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Format(format!("{}: no value column", query.display())))?
            .series,
    };
    let t = engine.backbone.config.context_len;
    if series.len() < t {
        return Err(Error::dim("query context length", t, series.len()));
    }
    let context = &series.values[series.len() - t..];
    let f = Forecaster::new(&engine, &kb, options(config))?;
    let result = f.rolling_forecast(context, config.horizon())?;
    if result.fallback {
        println!("fallback=backbone-only");
    }
    println!(
        "horizon={} rounds={} retrieval_ms={:.3} forward_ms={:.3} total_ms={:.3}",
        result.forecast.len(),
        result.traces.len(),
        result.timings.retrieval_ms,
        result.timings.forward_ms,
        result.timings.total_ms()
    );
    match out {
        Some(p) => write_file(p, result.to_csv().as_bytes())?,
        None => print!("{}", result.to_csv()),
    }
    if let Some(p) = trace {
        write_file(p, result.trace_json().as_bytes())?;
    }
    Ok(())
}

fn evaluate_cmd(
    config: &RunConfig,
    backbone: &Path,
    kb: &Path,
    engine: Option<&Path>,
    store: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let engine = load_engine(config, backbone, engine)?;
    let kb = KnowledgeBase::load(kb, &engine.backbone, false)?;
    let store = SeriesStore::load(store)?;
    let splits = splits(config, &store)?;
    let scalers = fit_scalers(&splits);
    let t = engine.backbone.config.context_len;
    let test: Vec<TimeSeriesPair> = splits
        .iter()
        .flat_map(|s| make_pairs(&s.test, t, config.horizon(), config.test_stride))
        .collect();
    let f = Forecaster::new(&engine, &kb, options(config))?;
    let settings = EvalSettings {
        allow_leakage: config.allow_leakage,
        window_limit: config.window_limit,
        label: kb.meta.regime.to_string(),
    };
    let row = evaluate(&test, &f, &scalers, &settings)?;
    println!(
        "mse={:.6} mae={:.6} windows={} backbone_mse={:.6} backbone_mae={:.6} delta_mse_pct={:.3} fallback_windows={}",
        row.metrics.mse,
        row.metrics.mae,
        row.metrics.n_windows,
        row.baseline.mse,
        row.baseline.mae,
        row.delta_mse_pct(),
        row.fallback_windows
    );
    println!("run_fingerprint={}", row.fingerprint);
    if let Some(p) = report {
        let csv = format!(
            "label,mse,mae,n_windows,backbone_mse,backbone_mae,delta_mse_pct,fingerprint\n{},{},{},{},{},{},{},{}\n",
            row.label,
            row.metrics.mse,
            row.metrics.mae,
            row.metrics.n_windows,
            row.baseline.mse,
            row.baseline.mae,
            row.delta_mse_pct(),
            row.fingerprint
        );
        write_file(p, csv.as_bytes())?;
    }
    Ok(())
}

fn ablate_cmd(config: &RunConfig, axis: AblationAxis, grid: Vec<String>, out: Option<&Path>) -> Result<()> {
    let grid = if grid.is_empty() { axis.default_grid() } else { grid };
    let bench = Benchmark::generate(config.benchmark())?;
    let base = AblationBase {
        regime: config.regime,
        k: config.k,
        lookback: config.lookback(),
        metric: config.metric,
        horizon: config.horizon(),
        settings: EvalSettings {
            allow_leakage: config.allow_leakage,
            window_limit: config.window_limit,
            label: String::new(),
        },
    };
    let table = ablate(axis, &grid, &bench, &base, None)?;
    print!("{}", table.to_text());
    if let Some(p) = out {
        write_file(p, table.to_csv().as_bytes())?;
    }
    Ok(())
}

fn analyze(store: &Path, out: Option<&Path>) -> Result<()> {
    let store = SeriesStore::load(store)?;
    let mut csv = String::from("series,autocorr_lag1,noise_ratio,volatility,stationarity,degenerate\n");
    println!(
        "{:<24} {:>10} {:>10} {:>12} {:>12}",
        "series", "autocorr", "noise", "volatility", "stationarity"
    );
    let mut tags: Vec<&str> = Vec::new();
    for s in &store.series {
        let c = characteristics(&s.values)?;
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>12.4} {:>12.4}{}",
            s.id,
            c.autocorr_lag1,
            c.noise_ratio,
            c.volatility,
            c.stationarity,
            if c.degenerate { "  (constant)" } else { "" }
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id, c.autocorr_lag1, c.noise_ratio, c.volatility, c.stationarity, c.degenerate
        ));
        if !tags.contains(&s.source_tag.as_str()) {
            tags.push(&s.source_tag);
        }
    }
    for tag in tags {
        let c = dataset_characteristics(
            store
                .series
                .iter()
                .filter(|s| s.source_tag == tag)
                .map(|s| s.values.as_slice()),
        )?;
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>12.4} {:>12.4}",
            format!("[{tag}]"),
            c.autocorr_lag1,
            c.noise_ratio,
            c.volatility,
            c.stationarity
        );
        csv.push_str(&format!(
            "[{tag}],{},{},{},{},{}\n",
            c.autocorr_lag1, c.noise_ratio, c.volatility, c.stationarity, c.degenerate
        ));
    }
    if let Some(p) = out {
        write_file(p, csv.as_bytes())?;
    }
    Ok(())
}
