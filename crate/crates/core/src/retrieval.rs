//! Knowledge base of (context, embedding, horizon) triplets with exact top-k
//! search under Euclidean, cosine and DTW distances.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::codec::{self, Decoder, Encoder};
use crate::data::{zscore, Origin, TimeSeriesPair, WindowStats};
use crate::error::{ensure_len, Error, Result};

pub const KB_MAGIC: &[u8; 4] = b"TSKB";
pub const KB_VERSION: u32 = 1;

/// Serialized as its textual form (`euclidean`, `cosine`, `dtw`, `dtw:16`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
    /// Dynamic time warping over normalized contexts, optionally restricted
    /// to a Sakoe-Chiba band of the given half-width.
    Dtw { band: Option<usize> },
}

impl DistanceMetric {
    pub fn name(&self) -> String {
        match self {
            DistanceMetric::Euclidean => "euclidean".into(),
            DistanceMetric::Cosine => "cosine".into(),
            DistanceMetric::Dtw { band: None } => "dtw".into(),
            DistanceMetric::Dtw { band: Some(w) } => format!("dtw:{w}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DistanceMetric::Dtw { band: Some(0) } = self {
            return Err(Error::InvalidArgument("DTW band must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl From<DistanceMetric> for String {
    fn from(m: DistanceMetric) -> String {
        m.name()
    }
}

impl TryFrom<String> for DistanceMetric {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    /// Accepts `euclidean`, `cosine`, `dtw` and `dtw:<band>`.
    fn from_str(s: &str) -> Result<Self> {
        let metric = match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => DistanceMetric::Euclidean,
            "cosine" => DistanceMetric::Cosine,
            "dtw" => DistanceMetric::Dtw { band: None },
            other => match other.strip_prefix("dtw:") {
                Some(w) => DistanceMetric::Dtw {
                    band: Some(w.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad DTW band '{w}'"))
                    })?),
                },
                None => return Err(Error::InvalidArgument(format!("unknown metric '{s}'"))),
            },
        };
        metric.validate()?;
        Ok(metric)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `1 − cos(a, b)`. Two zero vectors are identical (0); one zero vector is
/// orthogonal to anything (1).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => 1.0 - dot / (na.sqrt() * nb.sqrt()),
    }
}

/// Square root of the minimal accumulated squared pointwise cost.
pub fn dtw(a: &[f64], b: &[f64], band: Option<usize>) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return if n == m { 0.0 } else { f64::INFINITY };
    }
    let w = band.unwrap_or(usize::MAX);
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = if w == usize::MAX { 1 } else { i.saturating_sub(w).max(1) };
        let hi = if w == usize::MAX { m } else { (i + w).min(m) };
        for j in lo..=hi {
            let c = (a[i - 1] - b[j - 1]) * (a[i - 1] - b[j - 1]);
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = c + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m].sqrt()
}

pub fn distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    ensure_len("distance operand length", a.len(), b.len())?;
    Ok(match metric {
        DistanceMetric::Euclidean => euclidean(a, b),
        DistanceMetric::Cosine => cosine(a, b),
        DistanceMetric::Dtw { band } => dtw(a, b, band),
    })
}

/// Provenance of a knowledge base relative to the evaluation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    InDomain,
    DistributionShift,
    CrossDomain,
    MultiDomain,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::InDomain,
        Regime::DistributionShift,
        Regime::CrossDomain,
        Regime::MultiDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::InDomain => "in-domain",
            Regime::DistributionShift => "distribution-shift",
            Regime::CrossDomain => "cross-domain",
            Regime::MultiDomain => "multi-domain",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Regime::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("knowledge base: unknown regime code {c}")))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    /// Instance-normalized context.
    pub context: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Horizon normalized by its own context's statistics.
    pub horizon: Vec<f64>,
    pub origin: Origin,
}

impl KbEntry {
    pub fn span(&self) -> std::ops::Range<usize> {
        self.origin.start..self.origin.start + self.context.len() + self.horizon.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbMeta {
    pub context_len: usize,
    pub horizon_len: usize,
    pub dim: usize,
    /// Number of trailing context steps seen by the retrieval encoder.
    pub lookback: usize,
    pub encoder_hash: String,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    pub entries: Vec<KbEntry>,
    /// n × d, row i is `entries[i].embedding`.
    pub embedding_matrix: Vec<f64>,
    pub meta: KbMeta,
}

/// Embeds a raw query window: instance-normalizes it with its own statistics
/// and encodes the last `lookback` steps.
pub fn embed_query(
    context: &[f64],
    encoder: &BackboneParams,
    lookback: usize,
) -> Result<(Vec<f64>, WindowStats)> {
    ensure_len("query context length", encoder.config.context_len, context.len())?;
    let stats = WindowStats::of(context);
    let normalized = zscore(context, stats);
    Ok((encoder.encode_lookback(&normalized, lookback)?, stats))
}

impl KnowledgeBase {
    pub fn empty(meta: KbMeta) -> Self {
        KnowledgeBase {
            entries: Vec::new(),
            embedding_matrix: Vec::new(),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds the knowledge base with the full context as retrieval lookback.
    pub fn build(pairs: &[TimeSeriesPair], encoder: &BackboneParams, regime: Regime) -> Result<Self> {
        Self::build_with_lookback(pairs, encoder, regime, encoder.config.context_len)
    }

    pub fn build_with_lookback(
        pairs: &[TimeSeriesPair],
        encoder: &BackboneParams,
        regime: Regime,
        lookback: usize,
    ) -> Result<Self> {
        if !encoder.frozen {
            return Err(Error::InvalidArgument(
                "knowledge bases must be built with a frozen encoder".into(),
            ));
        }
        let c = encoder.config;
        for p in pairs {
            ensure_len("knowledge-base context length", c.context_len, p.context.len())?;
            ensure_len("knowledge-base horizon length", c.horizon_len, p.horizon.len())?;
        }
        if pairs.is_empty() {
            log::warn!("building an empty knowledge base; retrieval will fall back to the backbone");
        }
        let entries: Vec<KbEntry> = pairs
            .par_iter()
            .map(|p| {
                let context = p.normalized_context();
                let embedding = encoder.encode_lookback(&context, lookback)?;
                Ok(KbEntry {
                    horizon: p.normalized_horizon(),
                    context,
                    embedding,
                    origin: p.origin.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let embedding_matrix = entries.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        Ok(KnowledgeBase {
            entries,
            embedding_matrix,
            meta: KbMeta {
                context_len: c.context_len,
                horizon_len: c.horizon_len,
                dim: c.dim,
                lookback,
                encoder_hash: encoder.hash(),
                regime,
            },
        })
    }

    /// Concatenates entries of several knowledge bases built with the same encoder.
    pub fn merge(parts: &[&KnowledgeBase], regime: Regime) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to merge".into()))?;
        let mut meta = first.meta.clone();
        meta.regime = regime;
        let mut out = KnowledgeBase::empty(meta);
        for kb in parts {
            if kb.meta.encoder_hash != first.meta.encoder_hash {
                return Err(Error::HashMismatch {
                    what: "merged knowledge-base encoder".into(),
                    expected: first.meta.encoder_hash.clone(),
                    found: kb.meta.encoder_hash.clone(),
                });
            }
            ensure_len("merged knowledge-base lookback", first.meta.lookback, kb.meta.lookback)?;
            out.entries.extend(kb.entries.iter().cloned());
            out.embedding_matrix.extend_from_slice(&kb.embedding_matrix);
        }
        Ok(out)
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        let d = self.meta.dim;
        &self.embedding_matrix[i * d..(i + 1) * d]
    }

    pub fn check_encoder(&self, encoder: &BackboneParams) -> Result<()> {
        let hash = encoder.hash();
        if hash != self.meta.encoder_hash {
            return Err(Error::HashMismatch {
                what: "knowledge-base encoder hash".into(),
                expected: self.meta.encoder_hash.clone(),
                found: hash,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(KB_MAGIC, KB_VERSION);
        let m = &self.meta;
        e.usize(m.context_len);
        e.usize(m.horizon_len);
        e.usize(m.dim);
        e.usize(m.lookback);
        e.u8(m.regime.code());
        e.str(&m.encoder_hash);
        e.usize(self.entries.len());
        for entry in &self.entries {
            e.str(&entry.origin.series_id);
            e.usize(entry.origin.start);
            e.f64s(&entry.context);
            e.f64s(&entry.embedding);
            e.f64s(&entry.horizon);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, KB_MAGIC, KB_VERSION, "knowledge base")?;
        let meta = KbMeta {
            context_len: d.usize()?,
            horizon_len: d.usize()?,
            dim: d.usize()?,
            lookback: d.usize()?,
            regime: Regime::from_code(d.u8()?)?,
            encoder_hash: d.str()?,
        };
        let n = d.usize()?;
        let mut kb = KnowledgeBase::empty(meta);
        let (t, l, dim) = (kb.meta.context_len, kb.meta.horizon_len, kb.meta.dim);
        for _ in 0..n {
            let series_id = d.str()?;
            let start = d.usize()?;
            let context = d.f64s(t)?;
            let embedding = d.f64s(dim)?;
            let horizon = d.f64s(l)?;
            if context
                .iter()
                .chain(&embedding)
                .chain(&horizon)
                .any(|v| !v.is_finite())
            {
                return Err(Error::Format(format!(
                    "knowledge base: non-finite values in entry {}",
                    kb.entries.len()
                )));
            }
            kb.embedding_matrix.extend_from_slice(&embedding);
            kb.entries.push(KbEntry {
                context,
                embedding,
                horizon,
                origin: Origin { series_id, start },
            });
        }
        d.finish()?;
        Ok(kb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    /// Loads a knowledge base, verifying it was built by `encoder` unless
    /// `allow_hash_mismatch` is set.
    pub fn load(path: &Path, encoder: &BackboneParams, allow_hash_mismatch: bool) -> Result<Self> {
        let kb = Self::from_bytes(&codec::read_file(path)?)?;
        ensure_len("knowledge-base embedding dim", encoder.config.dim, kb.meta.dim)?;
        ensure_len(
            "knowledge-base context length",
            encoder.config.context_len,
            kb.meta.context_len,
        )?;
        ensure_len(
            "knowledge-base horizon length",
            encoder.config.horizon_len,
            kb.meta.horizon_len,
        )?;
        if !allow_hash_mismatch {
            kb.check_encoder(encoder)?;
        }
        Ok(kb)
    }
}

/// What a query offers to the search: its embedding, and its normalized
/// context (needed for DTW only).
#[derive(Debug, Clone, Copy)]
pub struct QueryKey<'a> {
    pub embedding: &'a [f64],
    pub context: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieved {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    pub items: Vec<Retrieved>,
    pub metric: DistanceMetric,
    pub k: usize,
}

impl RetrievedSet {
    pub fn indices(&self) -> Vec<usize> {
        self.items.iter().map(|r| r.index).collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.items.iter().map(|r| r.distance).collect()
    }

    pub fn horizons<'a>(&self, kb: &'a KnowledgeBase) -> Vec<&'a [f64]> {
        self.items
            .iter()
            .map(|r| kb.entries[r.index].horizon.as_slice())
            .collect()
    }
}

/// Ascending distance, ties broken by lower entry index.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn top_k(kb: &KnowledgeBase, query: QueryKey<'_>, k: usize, metric: DistanceMetric) -> Result<RetrievedSet> {
    top_k_filtered(kb, query, k, metric, |_| true)
}

/// Exact top-k over the entries accepted by `keep`.
pub fn top_k_filtered<F>(
    kb: &KnowledgeBase,
    query: QueryKey<'_>,
    k: usize,
    metric: DistanceMetric,
    keep: F,
) -> Result<RetrievedSet>
where
    F: Fn(usize) -> bool,
{
    metric.validate()?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(kb.len());
    if k > 0 && !kb.is_empty() {
        match metric {
            DistanceMetric::Euclidean | DistanceMetric::Cosine => {
                ensure_len("query embedding dim", kb.meta.dim, query.embedding.len())?;
                let f = if metric == DistanceMetric::Euclidean {
                    euclidean
                } else {
                    cosine
                };
                for i in (0..kb.len()).filter(|&i| keep(i)) {
                    scored.push((f(query.embedding, kb.embedding(i)), i));
                }
            }
            DistanceMetric::Dtw { band } => {
                let ctx = query.context.ok_or_else(|| {
                    Error::InvalidArgument("DTW retrieval needs the query context".into())
                })?;
                ensure_len("query context length", kb.meta.context_len, ctx.len())?;
                let from = kb.meta.context_len - kb.meta.lookback;
                for i in (0..kb.len()).filter(|&i| keep(i)) {
                    scored.push((dtw(&ctx[from..], &kb.entries[i].context[from..], band), i));
                }
            }
        }
    }
    let take = k.min(scored.len());
    if take < scored.len() && take > 0 {
        scored.select_nth_unstable_by(take - 1, rank_order);
    }
    scored.truncate(take);
    scored.sort_unstable_by(rank_order);
    Ok(RetrievedSet {
        items: scored
            .into_iter()
            .map(|(distance, index)| Retrieved { index, distance })
            .collect(),
        metric,
        k,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LeakageReport {
    /// (knowledge-base entry, test pair) index pairs whose spans overlap.
    pub overlaps: Vec<(usize, usize)>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.overlaps.is_empty()
    }

    pub fn leaking_entries(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.overlaps.iter().map(|o| o.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Reports knowledge-base entries sharing any index of the same series with a
/// test context or horizon.
pub fn leakage_check(kb: &KnowledgeBase, test_pairs: &[TimeSeriesPair]) -> LeakageReport {
    use std::collections::HashMap;
    let mut by_series: HashMap<&str, Vec<(usize, std::ops::Range<usize>)>> = HashMap::new();
    for (j, p) in test_pairs.iter().enumerate() {
        by_series
            .entry(p.origin.series_id.as_str())
            .or_default()
            .push((j, p.span()));
    }
    let mut overlaps = Vec::new();
    for (i, e) in kb.entries.iter().enumerate() {
        if let Some(tests) = by_series.get(e.origin.series_id.as_str()) {
            let span = e.span();
            for (j, t) in tests {
                if span.start < t.end && t.start < span.end {
                    overlaps.push((i, *j));
                }
            }
        }
    }
    LeakageReport { overlaps }
}
