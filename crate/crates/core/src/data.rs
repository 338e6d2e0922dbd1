//! Series ingestion, windowing into (context, horizon) pairs, normalization,
//! chronological splitting and the synthetic motif corpus.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to window standard deviations.
pub const STD_EPS: f64 = 1e-8;

pub const DEFAULT_CONTEXT: usize = 512;
pub const DEFAULT_HORIZON: usize = 64;
pub const DEFAULT_KB_STRIDE: usize = 64;

/// A single univariate channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    pub values: Vec<f64>,
    pub source_tag: String,
    /// Position of `values[0]` in the original (unsplit) series.
    #[serde(default)]
    pub offset: usize,
}

impl Series {
    pub fn new(id: impl Into<String>, values: Vec<f64>, source_tag: impl Into<String>) -> Self {
        Series {
            id: id.into(),
            values,
            source_tag: source_tag.into(),
            offset: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Where a window came from: series id and the absolute start index of its context.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub series_id: String,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mean: f64,
    pub std: f64,
}

impl WindowStats {
    /// Population mean and standard deviation, with `std` clamped to [`STD_EPS`].
    pub fn of(window: &[f64]) -> Self {
        let n = window.len().max(1) as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        WindowStats {
            mean,
            std: var.sqrt().max(STD_EPS),
        }
    }
}

pub fn zscore(window: &[f64], stats: WindowStats) -> Vec<f64> {
    window.iter().map(|x| (x - stats.mean) / stats.std).collect()
}

pub fn denormalize(window: &[f64], stats: WindowStats) -> Vec<f64> {
    window.iter().map(|z| z * stats.std + stats.mean).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPair {
    pub context: Vec<f64>,
    pub horizon: Vec<f64>,
    pub origin: Origin,
    pub norm_stats: WindowStats,
    pub source_tag: String,
}

impl TimeSeriesPair {
    pub fn new(context: Vec<f64>, horizon: Vec<f64>, origin: Origin, source_tag: &str) -> Self {
        let norm_stats = WindowStats::of(&context);
        TimeSeriesPair {
            context,
            horizon,
            origin,
            norm_stats,
            source_tag: source_tag.to_string(),
        }
    }

    pub fn normalized_context(&self) -> Vec<f64> {
        zscore(&self.context, self.norm_stats)
    }

    /// Horizon scaled by the statistics of its own context.
    pub fn normalized_horizon(&self) -> Vec<f64> {
        zscore(&self.horizon, self.norm_stats)
    }

    /// Half-open absolute index range covered by context and horizon.
    pub fn span(&self) -> std::ops::Range<usize> {
        self.origin.start..self.origin.start + self.context.len() + self.horizon.len()
    }
}

/// Slides a `context_len + horizon_len` window over `series` with the given stride.
pub fn make_pairs(
    series: &Series,
    context_len: usize,
    horizon_len: usize,
    stride: usize,
) -> Vec<TimeSeriesPair> {
    assert!(stride > 0, "stride must be positive");
    let window = context_len + horizon_len;
    if series.len() < window {
        log::warn!(
            "series {} has {} points, fewer than context+horizon = {}; no pairs produced",
            series.id,
            series.len(),
            window
        );
        return Vec::new();
    }
    (0..=series.len() - window)
        .step_by(stride)
        .map(|start| {
            let ctx = series.values[start..start + context_len].to_vec();
            let hor = series.values[start + context_len..start + window].to_vec();
            let origin = Origin {
                series_id: series.id.clone(),
                start: series.offset + start,
            };
            TimeSeriesPair::new(ctx, hor, origin, &series.source_tag)
        })
        .collect()
}

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl SplitSpec {
    pub const ETT: SplitSpec = SplitSpec {
        train_frac: 0.6,
        val_frac: 0.2,
        test_frac: 0.2,
    };
    pub const STANDARD: SplitSpec = SplitSpec {
        train_frac: 0.7,
        val_frac: 0.1,
        test_frac: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be non-negative, got {fracs:?}"
            )));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSeries {
    pub train: Series,
    pub val: Series,
    pub test: Series,
}

/// Contiguous chronological train/val/test segments; no shuffling.
pub fn split(series: &Series, spec: &SplitSpec) -> Result<SplitSeries> {
    spec.validate()?;
    let n = series.len();
    let n_train = ((n as f64) * spec.train_frac).round() as usize;
    let n_train = n_train.min(n);
    let n_val = (((n as f64) * spec.val_frac).round() as usize).min(n - n_train);
    let segment = |lo: usize, hi: usize| Series {
        id: series.id.clone(),
        values: series.values[lo..hi].to_vec(),
        source_tag: series.source_tag.clone(),
        offset: series.offset + lo,
    };
    Ok(SplitSeries {
        train: segment(0, n_train),
        val: segment(n_train, n_train + n_val),
        test: segment(n_train + n_val, n),
    })
}

/// Dataset-level standardization, fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalScaler {
    pub mean: f64,
    pub std: f64,
    pub fitted_on: String,
}

impl GlobalScaler {
    pub fn fit<'a, I>(segments: I, fitted_on: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for seg in segments {
            for &x in seg {
                count += 1;
                sum += x;
                sum_sq += x * x;
            }
        }
        let n = count.max(1) as f64;
        let mean = sum / n;
        let var = (sum_sq / n - mean * mean).max(0.0);
        GlobalScaler {
            mean,
            std: var.sqrt().max(STD_EPS),
            fitted_on: fitted_on.into(),
        }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.mean) / self.std).collect()
    }
}

/// Result of reading one CSV column.
#[derive(Debug, Clone)]
pub struct LoadedSeries {
    pub series: Series,
    /// Rows skipped because the value was empty, NaN or infinite.
    pub dropped_rows: usize,
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".to_string())
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads one named column of a headered CSV file.
pub fn load_csv(path: &Path, column: &str) -> Result<LoadedSeries> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = headers.iter().position(|h| h == column).ok_or_else(|| {
        Error::Format(format!("{}: missing column '{column}'", path.display()))
    })?;
    let mut values = Vec::new();
    let mut dropped = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let cell = record.get(col).unwrap_or("");
        if is_missing(cell) {
            dropped += 1;
            continue;
        }
        let v: f64 = cell.parse().map_err(|_| {
            Error::Format(format!(
                "{}: row {}: cannot parse '{cell}' as a real",
                path.display(),
                row + 2
            ))
        })?;
        if v.is_finite() {
            values.push(v);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!(
            "{}: dropped {dropped} non-finite rows in column '{column}'",
            path.display()
        );
    }
    if values.is_empty() {
        return Err(Error::Format(format!(
            "{}: zero usable rows in column '{column}'",
            path.display()
        )));
    }
    let stem = file_stem(path);
    Ok(LoadedSeries {
        series: Series::new(format!("{stem}:{column}"), values, stem),
        dropped_rows: dropped,
    })
}

/// Reads every value column as an independent univariate series.
/// The first column is treated as the timestamp and ignored when the file has
/// more than one column.
pub fn load_csv_columns(path: &Path) -> Result<Vec<LoadedSeries>> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let skip = usize::from(headers.len() > 1);
    drop(reader);
    headers
        .iter()
        .skip(skip)
        .map(|name| load_csv(path, name))
        .collect()
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na")
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MotifKind {
    Sine,
    Sawtooth,
    Trend,
}

/// A shape template. Periodic motifs use an integer period so that the
/// generated signal repeats exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub kind: MotifKind,
    pub period: usize,
    pub amplitude: f64,
}

impl Motif {
    fn value(&self, t: usize, phase: usize, len: usize) -> f64 {
        match self.kind {
            MotifKind::Sine => {
                let p = self.period as f64;
                self.amplitude * (2.0 * PI * ((t + phase) % self.period) as f64 / p).sin()
            }
            MotifKind::Sawtooth => {
                let p = self.period as f64;
                self.amplitude * (2.0 * ((t + phase) % self.period) as f64 / p - 1.0)
            }
            MotifKind::Trend => self.amplitude * (t as f64 / len.max(1) as f64 - 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifBank {
    pub motifs: Vec<Motif>,
}

impl MotifBank {
    /// Periods are drawn from `period_range`; one motif in eight is a trend.
    pub fn random<R: Rng>(rng: &mut R, size: usize, period_range: (usize, usize)) -> Self {
        let motifs = (0..size)
            .map(|_| {
                let roll: f64 = rng.gen();
                let kind = if roll < 0.125 {
                    MotifKind::Trend
                } else if roll < 0.6 {
                    MotifKind::Sine
                } else {
                    MotifKind::Sawtooth
                };
                Motif {
                    kind,
                    period: rng.gen_range(period_range.0..=period_range.1),
                    amplitude: rng.gen_range(0.5..2.0),
                }
            })
            .collect();
        MotifBank { motifs }
    }

    /// Same motif kinds with rescaled amplitudes and periods.
    pub fn perturbed(&self, amplitude_scale: f64, period_scale: f64) -> Self {
        MotifBank {
            motifs: self
                .motifs
                .iter()
                .map(|m| Motif {
                    kind: m.kind,
                    period: ((m.period as f64 * period_scale).round() as usize).max(2),
                    amplitude: m.amplitude * amplitude_scale,
                })
                .collect(),
        }
    }

    pub fn union(&self, other: &MotifBank) -> Self {
        let mut motifs = self.motifs.clone();
        motifs.extend_from_slice(&other.motifs);
        MotifBank { motifs }
    }
}

pub const DEFAULT_PERIOD_RANGE: (usize, usize) = (8, 96);

/// Each series is a convex mixture of 1–3 bank motifs at random phase plus
/// Gaussian noise, shifted and scaled by a random level.
pub fn generate_from_bank(
    bank: &MotifBank,
    seed: u64,
    n_series: usize,
    len: usize,
    noise_std: f64,
    tag: &str,
) -> Vec<Series> {
    if bank.motifs.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite noise std");
    (0..n_series)
        .map(|i| {
            let n_mix = rng.gen_range(1..=3usize.min(bank.motifs.len()));
            let picks: Vec<(Motif, usize, f64)> = (0..n_mix)
                .map(|_| {
                    let m = bank.motifs[rng.gen_range(0..bank.motifs.len())];
                    let phase = rng.gen_range(0..m.period.max(1));
                    (m, phase, rng.gen_range(0.1..1.0))
                })
                .collect();
            let total: f64 = picks.iter().map(|p| p.2).sum();
            let level = rng.gen_range(-5.0..5.0);
            let scale = rng.gen_range(0.5..3.0);
            let values = (0..len)
                .map(|t| {
                    let signal: f64 = picks
                        .iter()
                        .map(|(m, phase, w)| w / total * m.value(t, *phase, len))
                        .sum();
                    let eps = if noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    level + scale * (signal + eps)
                })
                .collect();
            Series::new(format!("{tag}-{i}"), values, tag)
        })
        .collect()
}

/// Seeded synthetic corpus: draws a motif bank, then series from it.
pub fn generate_motif_corpus(
    seed: u64,
    n_series: usize,
    len: usize,
    motif_bank_size: usize,
    noise_std: f64,
) -> Vec<Series> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = MotifBank::random(&mut rng, motif_bank_size, DEFAULT_PERIOD_RANGE);
    generate_from_bank(
        &bank,
        seed.wrapping_add(0x9E37_79B9),
        n_series,
        len,
        noise_std,
        &format!("motif{seed}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_reads_a_column() {
        let f = write_tmp("value\n1.0\n2.0\n3.0\n");
        let loaded = load_csv(f.path(), "value").unwrap();
        assert_eq!(loaded.series.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.series.source_tag, file_stem(f.path()));
    }

    #[test]
    fn load_csv_drops_nan_rows() {
        let mut body = String::from("date,v\n");
        for i in 0..100 {
            if i == 42 {
                body.push_str("t42,NaN\n");
            } else {
                body.push_str(&format!("t{i},{i}.5\n"));
            }
        }
        let loaded = load_csv(write_tmp(&body).path(), "v").unwrap();
        assert_eq!(loaded.series.len(), 99);
        assert_eq!(loaded.dropped_rows, 1);
    }

    #[test]
    fn load_csv_errors() {
        let empty = write_tmp("");
        let err = load_csv(empty.path(), "v").unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Format);

        let header_only = write_tmp("v\n");
        let err = load_csv(header_only.path(), "v").unwrap_err();
        assert!(err.to_string().contains("zero usable rows"), "{err}");

        let f = write_tmp("a\n1\n");
        assert!(load_csv(f.path(), "b")
            .unwrap_err()
            .to_string()
            .contains("missing column"));
        let missing = load_csv(Path::new("/nonexistent/x.csv"), "a").unwrap_err();
        assert_eq!(missing.category(), crate::ErrorCategory::Io);

        let bad = write_tmp("a\n1\nhello\n");
        assert_eq!(
            load_csv(bad.path(), "a").unwrap_err().category(),
            crate::ErrorCategory::Format
        );
    }

    #[test]
    fn load_all_columns_skips_timestamp() {
        let f = write_tmp("date,HUFL,OT\n2016,1,10\n2017,2,20\n");
        let all = load_csv_columns(f.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].series.values, vec![10.0, 20.0]);
        assert!(all[0].series.id.ends_with(":HUFL"));
    }

    fn ramp(n: usize) -> Series {
        Series::new("s", (0..n).map(|i| i as f64).collect(), "t")
    }

    #[test]
    fn make_pairs_counts() {
        let p = make_pairs(&ramp(640), 512, 64, 64);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].origin.start, 0);
        assert_eq!(p[1].origin.start, 64);
        assert_eq!(make_pairs(&ramp(576), 512, 64, 1).len(), 1);
        assert!(make_pairs(&ramp(100), 512, 64, 1).is_empty());
    }

    #[test]
    fn zscore_standardizes() {
        let x = [1.0, 2.0, 3.0];
        let stats = WindowStats::of(&x);
        assert_eq!(stats.mean, 2.0);
        let z = zscore(&x, stats);
        let m = z.iter().sum::<f64>() / 3.0;
        let s = (z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0).sqrt();
        assert!(m.abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_window_normalizes_to_zero() {
        let stats = WindowStats::of(&[5.0, 5.0, 5.0]);
        assert_eq!(stats.std, STD_EPS);
        assert_eq!(zscore(&[5.0, 5.0, 5.0], stats), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zscore_round_trip_random_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.gen_range(2..200);
            let scale = rng.gen_range(0.01..100.0);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let stats = WindowStats::of(&x);
            let back = denormalize(&zscore(&x, stats), stats);
            for (a, b) in x.iter().zip(&back) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn split_arithmetic() {
        let s = split(&ramp(1000), &SplitSpec::ETT).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (600, 200, 200));
        assert_eq!(s.test.offset, 800);
        assert_eq!(s.test.values[0], 800.0);
        let s = split(&ramp(10), &SplitSpec::STANDARD).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let bad = SplitSpec {
            train_frac: 0.5,
            val_frac: 0.5,
            test_frac: 0.5,
        };
        assert!(split(&ramp(10), &bad).is_err());
    }

    #[test]
    fn split_pairs_never_share_indices() {
        let s = split(&ramp(3000), &SplitSpec::ETT).unwrap();
        let train = make_pairs(&s.train, 128, 32, 1);
        let test = make_pairs(&s.test, 128, 32, 1);
        let train_end = train.iter().map(|p| p.span().end).max().unwrap();
        let test_start = test.iter().map(|p| p.span().start).min().unwrap();
        assert!(train_end <= test_start);
        // absolute origins line up with the raw values
        assert_eq!(test[0].context[0], test[0].origin.start as f64);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_motif_corpus(3, 5, 300, 4, 0.1);
        let b = generate_motif_corpus(3, 5, 300, 4, 0.1);
        let bytes = |c: &[Series]| -> Vec<u8> {
            c.iter()
                .flat_map(|s| s.values.iter().flat_map(|v| v.to_le_bytes()))
                .collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert!(generate_motif_corpus(3, 0, 300, 4, 0.1).is_empty());
    }

    #[test]
    fn noiseless_single_sine_is_periodic() {
        let bank = MotifBank {
            motifs: vec![Motif {
                kind: MotifKind::Sine,
                period: 24,
                amplitude: 1.0,
            }],
        };
        let s = &generate_from_bank(&bank, 1, 1, 2400, 0.0, "sine")[0];
        // lag-period autocorrelation computed directly
        let lag = 24;
        let a = &s.values[..s.len() - lag];
        let b = &s.values[lag..];
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let r = cov / (va * vb).sqrt();
        assert!((r - 1.0).abs() < 1e-9, "{r}");
    }

    proptest! {
        #[test]
        fn windowing_count_and_contiguity(len in 0usize..400, t in 1usize..64, l in 1usize..32, stride in 1usize..40) {
            let s = ramp(len);
            let pairs = make_pairs(&s, t, l, stride);
            let expected = if len >= t + l { (len - t - l) / stride + 1 } else { 0 };
            prop_assert_eq!(pairs.len(), expected);
            for p in &pairs {
                prop_assert_eq!(p.context.len(), t);
                prop_assert_eq!(p.horizon.len(), l);
                prop_assert_eq!(p.horizon[0], p.context[t - 1] + 1.0);
                prop_assert_eq!(p.context[0], p.origin.start as f64);
            }
        }
    }
}
