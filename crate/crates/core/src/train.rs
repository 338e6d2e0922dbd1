//! Training loop for the fusion module with the backbone frozen, and the
//! engine checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arm::{ForwardMode, Fusion};
use crate::backbone::{BackboneConfig, BackboneParams};
use crate::codec::{self, Decoder, Encoder};
use crate::data::TimeSeriesPair;
use crate::error::{ensure_len, Error, Result};
use crate::optim::{AdamWHyper, AdamWState};
use crate::retrieval::{top_k_filtered, DistanceMetric, KnowledgeBase, QueryKey};

pub const ENGINE_MAGIC: &[u8; 4] = b"TSRE";
pub const ENGINE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub k: usize,
    pub dropout_p: f64,
    /// Evaluation-mode loss is recorded every this many steps (0 = never).
    pub eval_every: usize,
    pub metric: DistanceMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            k: 10,
            dropout_p: 0.2,
            eval_every: 100,
            metric: DistanceMetric::Euclidean,
        }
    }
}

impl TrainConfig {
    /// Batch 256 for 10,000 steps.
    pub fn large_scale() -> Self {
        TrainConfig {
            batch_size: 256,
            steps: 10_000,
            ..TrainConfig::default()
        }
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "training needs lr > 0, steps ≥ 1 and batch size ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// A pair prepared for training: normalized target plus fixed retrieval.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub query: Vec<f64>,
    pub target: Vec<f64>,
    pub retrieved: Vec<usize>,
}

fn overlaps(a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Embeds every pair and retrieves its neighbours once; the backbone and the
/// knowledge base are fixed during training so retrieval never changes.
/// Entries from the same series whose window overlaps the pair (the pair
/// itself included) are never retrieved, so the target cannot leak in.
pub fn prepare_pairs(
    pairs: &[TimeSeriesPair],
    kb: &KnowledgeBase,
    backbone: &BackboneParams,
    k: usize,
    metric: DistanceMetric,
) -> Result<Vec<PreparedPair>> {
    pairs
        .par_iter()
        .map(|p| {
            ensure_len("training context length", backbone.config.context_len, p.context.len())?;
            ensure_len("training horizon length", backbone.config.horizon_len, p.horizon.len())?;
            let span = p.span();
            let ctx = p.normalized_context();
            let query = backbone.encode(&ctx)?;
            let key = if kb.meta.lookback == backbone.config.context_len {
                query.clone()
            } else {
                backbone.encode_lookback(&ctx, kb.meta.lookback)?
            };
            let retrieved = top_k_filtered(
                kb,
                QueryKey {
                    embedding: &key,
                    context: Some(&ctx),
                },
                k,
                metric,
                |i| {
                    let e = &kb.entries[i];
                    e.origin.series_id != p.origin.series_id || !overlaps(&e.span(), &span)
                },
            )?
            .indices();
            Ok(PreparedPair {
                query,
                target: p.normalized_horizon(),
                retrieved,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub fusion: Fusion,
    /// Mean batch loss at every step (training mode, dropout on).
    pub loss_curve: Vec<LossPoint>,
    /// Evaluation-mode loss on the monitor subset, including step 0.
    pub eval_curve: Vec<LossPoint>,
}

impl TrainOutcome {
    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for p in &self.loss_curve {
            s.push_str(&format!("{},{}\n", p.step, p.loss));
        }
        s
    }
}

fn sample_loss(
    fusion: &Fusion,
    backbone: &BackboneParams,
    kb: &KnowledgeBase,
    pair: &PreparedPair,
    mode: ForwardMode,
) -> Result<(f64, Option<Vec<Vec<f64>>>, Vec<f64>)> {
    let horizons: Vec<&[f64]> = pair
        .retrieved
        .iter()
        .map(|&i| kb.entries[i].horizon.as_slice())
        .collect();
    let trace = fusion.forward(&pair.query, &horizons, mode)?;
    let forecast = backbone.project(trace.e_final())?;
    let l = forecast.len() as f64;
    let residual: Vec<f64> = forecast.iter().zip(&pair.target).map(|(f, y)| f - y).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / l;
    if let ForwardMode::Train { .. } = mode {
        let d_out: Vec<f64> = residual.iter().map(|r| 2.0 * r / l).collect();
        let d_final = backbone.project_input_grad(&d_out);
        Ok((loss, Some(fusion.backward(&trace, &d_final)?), d_out))
    } else {
        Ok((loss, None, Vec::new()))
    }
}

/// Mean evaluation-mode loss over prepared pairs.
pub fn eval_loss(
    fusion: &Fusion,
    backbone: &BackboneParams,
    kb: &KnowledgeBase,
    pairs: &[PreparedPair],
) -> Result<f64> {
    let losses: Vec<f64> = pairs
        .iter()
        .map(|p| sample_loss(fusion, backbone, kb, p, ForwardMode::Eval).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Evaluation-mode loss is tracked on this many evenly spaced pairs.
const MONITOR_PAIRS: usize = 256;

/// Trains only the fusion parameters. Each step samples a batch, retrieves
/// the top-k neighbours of every query (never an overlapping window), runs the
/// fusion in training mode, projects through the frozen head and applies
/// AdamW to the mean squared error in normalized space.
pub fn train_arm(
    pairs: &[TimeSeriesPair],
    kb: &KnowledgeBase,
    backbone: &BackboneParams,
    mut fusion: Fusion,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one pair".into()));
    }
    if !backbone.frozen {
        return Err(Error::InvalidArgument("backbone must be frozen before ARM training".into()));
    }
    kb.check_encoder(backbone)?;
    ensure_len("fusion embedding dim", backbone.config.dim, fusion.config().dim)?;
    ensure_len("fusion horizon length", backbone.config.horizon_len, fusion.config().horizon_len)?;
    match &mut fusion {
        Fusion::Arm(p) => p.config.dropout_p = config.dropout_p,
        Fusion::Gate(p) => p.config.dropout_p = config.dropout_p,
    }

    let prepared = prepare_pairs(pairs, kb, backbone, config.k, config.metric)?;
    let monitor = &crate::eval::subsample(&prepared, Some(MONITOR_PAIRS));
    let lens: Vec<usize> = fusion.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamWState::new(config.hyper(), &lens);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut eval_curve = Vec::new();
    if config.eval_every > 0 {
        eval_curve.push(LossPoint {
            step: 0,
            loss: eval_loss(&fusion, backbone, kb, monitor)?,
        });
    }

    for step in 1..=config.steps {
        let batch: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.gen_range(0..prepared.len()), rng.gen()))
            .collect();
        let results: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .map(|&(i, seed)| {
                let (loss, grads, _) =
                    sample_loss(&fusion, backbone, kb, &prepared[i], ForwardMode::Train { seed })?;
                Ok((loss, grads.expect("training mode returns gradients")))
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut total = lens.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let mut batch_loss = 0.0;
        for (loss, grads) in &results {
            batch_loss += loss;
            for (acc, g) in total.iter_mut().zip(grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * scale;
                }
            }
        }
        batch_loss *= scale;
        if !batch_loss.is_finite() {
            let ids: Vec<String> = batch
                .iter()
                .map(|(i, _)| format!("{}@{}", pairs[*i].origin.series_id, pairs[*i].origin.start))
                .collect();
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}; batch: {}",
                ids.join(" ")
            )));
        }
        let grad_refs: Vec<&[f64]> = total.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut fusion.tensors_mut(), &grad_refs)?;
        loss_curve.push(LossPoint {
            step,
            loss: batch_loss,
        });
        if config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps) {
            eval_curve.push(LossPoint {
                step,
                loss: eval_loss(&fusion, backbone, kb, monitor)?,
            });
        }
    }
    Ok(TrainOutcome {
        fusion,
        loss_curve,
        eval_curve,
    })
}

/// Trained fusion module bound to the backbone it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineCheckpoint {
    pub backbone_hash: String,
    pub backbone_config: BackboneConfig,
    pub fusion: Fusion,
}

impl EngineCheckpoint {
    pub fn new(backbone: &BackboneParams, fusion: Fusion) -> Self {
        EngineCheckpoint {
            backbone_hash: backbone.hash(),
            backbone_config: backbone.config,
            fusion,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(ENGINE_MAGIC, ENGINE_VERSION);
        e.str(&self.backbone_hash);
        let c = &self.backbone_config;
        e.usize(c.context_len);
        e.usize(c.horizon_len);
        e.usize(c.patch_len);
        e.usize(c.dim);
        e.u64(c.seed);
        self.fusion.encode_into(&mut e);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, ENGINE_MAGIC, ENGINE_VERSION, "engine checkpoint")?;
        let backbone_hash = d.str()?;
        let backbone_config = BackboneConfig {
            context_len: d.usize()?,
            horizon_len: d.usize()?,
            patch_len: d.usize()?,
            dim: d.usize()?,
            seed: d.u64()?,
        };
        let fusion = Fusion::decode_from(&mut d)?;
        d.finish()?;
        ensure_len("engine fusion dim", backbone_config.dim, fusion.config().dim)?;
        Ok(EngineCheckpoint {
            backbone_hash,
            backbone_config,
            fusion,
        })
    }

    /// Checks dimensions, then the backbone hash.
    pub fn check_backbone(&self, backbone: &BackboneParams) -> Result<()> {
        ensure_len("engine embedding dim", backbone.config.dim, self.backbone_config.dim)?;
        ensure_len(
            "engine horizon length",
            backbone.config.horizon_len,
            self.backbone_config.horizon_len,
        )?;
        ensure_len(
            "engine context length",
            backbone.config.context_len,
            self.backbone_config.context_len,
        )?;
        let hash = backbone.hash();
        if hash != self.backbone_hash {
            return Err(Error::HashMismatch {
                what: "engine backbone hash".into(),
                expected: self.backbone_hash.clone(),
                found: hash,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{init_arm, init_gate, ArmConfig};
    use crate::data::{generate_motif_corpus, make_pairs};
    use crate::retrieval::Regime;

    fn setup() -> (Vec<TimeSeriesPair>, KnowledgeBase, BackboneParams) {
        let corpus = generate_motif_corpus(4, 6, 400, 4, 0.05);
        let pairs: Vec<TimeSeriesPair> = corpus.iter().flat_map(|s| make_pairs(s, 64, 16, 16)).collect();
        let mut bb = BackboneParams::init(BackboneConfig {
            context_len: 64,
            horizon_len: 16,
            patch_len: 16,
            dim: 16,
            seed: 1,
        })
        .unwrap();
        bb.frozen = true;
        let kb = KnowledgeBase::build(&pairs, &bb, Regime::InDomain).unwrap();
        (pairs, kb, bb)
    }

    fn arm_cfg() -> ArmConfig {
        ArmConfig {
            heads: 2,
            ..ArmConfig::for_dims(16, 16)
        }
    }

    fn short() -> TrainConfig {
        TrainConfig {
            steps: 20,
            batch_size: 8,
            k: 4,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn retrieval_during_training_skips_overlapping_windows() {
        let (pairs, kb, bb) = setup();
        let prepared = prepare_pairs(&pairs, &kb, &bb, 5, DistanceMetric::Euclidean).unwrap();
        for (p, prep) in pairs.iter().zip(&prepared) {
            assert_eq!(prep.retrieved.len(), 5);
            for &i in &prep.retrieved {
                let e = &kb.entries[i];
                assert!(e.origin.series_id != p.origin.series_id || !overlaps(&e.span(), &p.span()));
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_leaves_backbone_alone() {
        let (pairs, kb, bb) = setup();
        let before = bb.to_bytes();
        let arm = Fusion::Arm(init_arm(arm_cfg()).unwrap());
        let a = train_arm(&pairs, &kb, &bb, arm.clone(), &short()).unwrap();
        let b = train_arm(&pairs, &kb, &bb, arm.clone(), &short()).unwrap();
        assert_eq!(bb.to_bytes(), before);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.fusion, b.fusion);
        assert_ne!(a.fusion, arm);
        assert_eq!(a.loss_curve.len(), 20);
        assert_eq!(a.eval_curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 10, 20]);
        assert!(a.loss_curve_csv().starts_with("step,loss\n1,"));
    }

    #[test]
    fn training_preconditions() {
        let (pairs, kb, bb) = setup();
        let arm = Fusion::Arm(init_arm(arm_cfg()).unwrap());
        assert!(train_arm(&[], &kb, &bb, arm.clone(), &short()).is_err());
        let mut other = bb.clone();
        other.proj_b[0] += 1.0;
        let err = train_arm(&pairs, &kb, &other, arm.clone(), &short()).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::HashMismatch);
        let mut thawed = bb.clone();
        thawed.frozen = false;
        assert!(train_arm(&pairs, &kb, &thawed, arm, &short()).is_err());
        let gate = Fusion::Gate(init_gate(arm_cfg()).unwrap());
        assert!(train_arm(&pairs, &kb, &bb, gate, &short()).is_ok());
    }

    #[test]
    fn engine_checkpoint_round_trip() {
        let (_, _, bb) = setup();
        for fusion in [
            Fusion::Arm(init_arm(arm_cfg()).unwrap()),
            Fusion::Gate(init_gate(arm_cfg()).unwrap()),
        ] {
            let ckpt = EngineCheckpoint::new(&bb, fusion);
            let bytes = ckpt.to_bytes();
            let back = EngineCheckpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_bytes(), bytes);
            back.check_backbone(&bb).unwrap();
            let err = EngineCheckpoint::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err();
            assert_eq!(err.category(), crate::ErrorCategory::Format);
        }
        let mut wide = BackboneParams::init(BackboneConfig {
            context_len: 64,
            horizon_len: 16,
            patch_len: 16,
            dim: 32,
            seed: 1,
        })
        .unwrap();
        wide.frozen = true;
        let ckpt = EngineCheckpoint::new(&bb, Fusion::Arm(init_arm(arm_cfg()).unwrap()));
        let err = ckpt.check_backbone(&wide).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::DimMismatch);
    }
}
