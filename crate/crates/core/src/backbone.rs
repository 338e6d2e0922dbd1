//! Frozen forecasting backbone: a patch-linear encoder with mean pooling and
//! `tanh`, plus a linear output head. The same encoder doubles as the
//! retrieval encoder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::data::TimeSeriesPair;
use crate::error::{ensure_len, Error, Result};
use crate::linalg::{matmul_vec_t, vec_matmul, Matrix};
use crate::optim::{AdamWHyper, AdamWState};

pub const BACKBONE_MAGIC: &[u8; 4] = b"TSRB";
pub const BACKBONE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub context_len: usize,
    pub horizon_len: usize,
    pub patch_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            context_len: 512,
            horizon_len: 64,
            patch_len: 64,
            dim: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.context_len % self.patch_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "context length {} is not divisible by patch length {}",
                self.context_len, self.patch_len
            )));
        }
        if self.dim < 8 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} is below the minimum of 8",
                self.dim
            )));
        }
        if self.horizon_len == 0 {
            return Err(Error::InvalidArgument("horizon length must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.context_len / self.patch_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    /// P × d
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    /// d × L
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    pub frozen: bool,
}

impl BackboneParams {
    pub fn init(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(BackboneParams {
            config,
            patch_w: Matrix::uniform_fan_in(config.patch_len, config.dim, &mut rng),
            patch_b: vec![0.0; config.dim],
            proj_w: Matrix::uniform_fan_in(config.dim, config.horizon_len, &mut rng),
            proj_b: vec![0.0; config.horizon_len],
            frozen: false,
        })
    }

    fn mean_patch(&self, context: &[f64]) -> Vec<f64> {
        let p = self.config.patch_len;
        let mut acc = vec![0.0; p];
        for patch in context.chunks_exact(p) {
            for (a, x) in acc.iter_mut().zip(patch) {
                *a += x;
            }
        }
        let n = self.config.n_patches() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    fn pre_activation(&self, context: &[f64]) -> Vec<f64> {
        // mean over patches of (patch · W + b) == (mean patch) · W + b
        let mut pre = vec_matmul(&self.mean_patch(context), &self.patch_w);
        for (z, b) in pre.iter_mut().zip(&self.patch_b) {
            *z += b;
        }
        pre
    }

    /// Embeds an instance-normalized context of length T.
    pub fn encode(&self, context: &[f64]) -> Result<Vec<f64>> {
        ensure_len("encoder context length", self.config.context_len, context.len())?;
        Ok(self
            .pre_activation(context)
            .into_iter()
            .map(f64::tanh)
            .collect())
    }

    /// Embeds only the last `lookback` steps; earlier positions are zeroed
    /// (left padding) before patching.
    pub fn encode_lookback(&self, context: &[f64], lookback: usize) -> Result<Vec<f64>> {
        ensure_len("encoder context length", self.config.context_len, context.len())?;
        if lookback == 0 || lookback > self.config.context_len {
            return Err(Error::InvalidArgument(format!(
                "lookback {lookback} outside 1..={}",
                self.config.context_len
            )));
        }
        if lookback == self.config.context_len {
            return self.encode(context);
        }
        let mut masked = vec![0.0; context.len()];
        let start = context.len() - lookback;
        masked[start..].copy_from_slice(&context[start..]);
        self.encode(&masked)
    }

    /// Output head: `e · W + b`, in normalized space.
    pub fn project(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        ensure_len("projection input dim", self.config.dim, embedding.len())?;
        let mut out = vec_matmul(embedding, &self.proj_w);
        for (o, b) in out.iter_mut().zip(&self.proj_b) {
            *o += b;
        }
        Ok(out)
    }

    /// Gradient of a loss w.r.t. the head input given the gradient w.r.t. its output.
    pub fn project_input_grad(&self, output_grad: &[f64]) -> Vec<f64> {
        matmul_vec_t(&self.proj_w, output_grad)
    }

    /// Backbone-only forecast for a normalized context.
    pub fn forecast_normalized(&self, context: &[f64]) -> Result<Vec<f64>> {
        self.project(&self.encode(context)?)
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.patch_w.data,
            &mut self.patch_b,
            &mut self.proj_w.data,
            &mut self.proj_b,
        ]
    }

    fn tensor_lens(&self) -> [usize; 4] {
        [
            self.patch_w.data.len(),
            self.patch_b.len(),
            self.proj_w.data.len(),
            self.proj_b.len(),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(BACKBONE_MAGIC, BACKBONE_VERSION);
        let c = &self.config;
        e.usize(c.context_len);
        e.usize(c.horizon_len);
        e.usize(c.patch_len);
        e.usize(c.dim);
        e.u64(c.seed);
        e.u8(u8::from(self.frozen));
        e.matrix(&self.patch_w);
        e.vector(&self.patch_b);
        e.matrix(&self.proj_w);
        e.vector(&self.proj_b);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, BACKBONE_MAGIC, BACKBONE_VERSION, "backbone checkpoint")?;
        let config = BackboneConfig {
            context_len: d.usize()?,
            horizon_len: d.usize()?,
            patch_len: d.usize()?,
            dim: d.usize()?,
            seed: d.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("backbone checkpoint: {e}")))?;
        let frozen = d.u8()? != 0;
        let patch_w = d.matrix_shaped("patch_w", config.patch_len, config.dim)?;
        let patch_b = d.vector_sized("patch_b", config.dim)?;
        let proj_w = d.matrix_shaped("proj_w", config.dim, config.horizon_len)?;
        let proj_b = d.vector_sized("proj_b", config.horizon_len)?;
        d.finish()?;
        Ok(BackboneParams {
            config,
            patch_w,
            patch_b,
            proj_w,
            proj_b,
            frozen,
        })
    }

    /// Decodes and checks the stored dimensions against the runtime ones.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &BackboneConfig) -> Result<Self> {
        let params = Self::from_bytes(bytes)?;
        let c = params.config;
        ensure_len("backbone embedding dim", expected.dim, c.dim)?;
        ensure_len("backbone context length", expected.context_len, c.context_len)?;
        ensure_len("backbone horizon length", expected.horizon_len, c.horizon_len)?;
        ensure_len("backbone patch length", expected.patch_len, c.patch_len)?;
        Ok(params)
    }

    /// SHA-256 of the checkpoint encoding; identifies the encoder a
    /// knowledge base was built with.
    pub fn hash(&self) -> String {
        codec::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            lr: 3e-3,
            weight_decay: 0.0,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct BackboneGrads {
    patch_w: Vec<f64>,
    patch_b: Vec<f64>,
    proj_w: Vec<f64>,
    proj_b: Vec<f64>,
}

/// Squared-error loss and its gradients for one normalized pair.
fn pair_loss_and_grad(
    params: &BackboneParams,
    context: &[f64],
    target: &[f64],
    grads: Option<&mut BackboneGrads>,
) -> f64 {
    let c = &params.config;
    let mean_patch = params.mean_patch(context);
    let mut pre = vec_matmul(&mean_patch, &params.patch_w);
    for (z, b) in pre.iter_mut().zip(&params.patch_b) {
        *z += b;
    }
    let emb: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
    let mut out = vec_matmul(&emb, &params.proj_w);
    for (o, b) in out.iter_mut().zip(&params.proj_b) {
        *o += b;
    }
    let l = c.horizon_len as f64;
    let loss = out
        .iter()
        .zip(target)
        .map(|(o, y)| (o - y) * (o - y))
        .sum::<f64>()
        / l;
    if let Some(g) = grads {
        let d_out: Vec<f64> = out.iter().zip(target).map(|(o, y)| 2.0 * (o - y) / l).collect();
        for (i, e) in emb.iter().enumerate() {
            let row = &mut g.proj_w[i * c.horizon_len..(i + 1) * c.horizon_len];
            for (r, d) in row.iter_mut().zip(&d_out) {
                *r += e * d;
            }
        }
        for (b, d) in g.proj_b.iter_mut().zip(&d_out) {
            *b += d;
        }
        let d_emb = matmul_vec_t(&params.proj_w, &d_out);
        let d_pre: Vec<f64> = d_emb.iter().zip(&emb).map(|(de, e)| de * (1.0 - e * e)).collect();
        for (p, m) in mean_patch.iter().enumerate() {
            let row = &mut g.patch_w[p * c.dim..(p + 1) * c.dim];
            for (r, d) in row.iter_mut().zip(&d_pre) {
                *r += m * d;
            }
        }
        for (b, d) in g.patch_b.iter_mut().zip(&d_pre) {
            *b += d;
        }
    }
    loss
}

/// Mean squared error of the backbone over normalized pairs.
pub fn backbone_loss(params: &BackboneParams, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|(x, y)| pair_loss_and_grad(params, x, y, None))
        .sum();
    total / pairs.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: BackboneParams,
    /// Full-corpus loss before training followed by one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits encoder and head with AdamW on squared error in normalized space and
/// returns frozen parameters.
pub fn pretrain_backbone(
    pairs: &[TimeSeriesPair],
    config: BackboneConfig,
    train: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "backbone pretraining needs at least one pair".into(),
        ));
    }
    let mut params = BackboneParams::init(config)?;
    let normalized: Vec<(Vec<f64>, Vec<f64>)> = pairs
        .iter()
        .map(|p| {
            ensure_len("pretraining context length", config.context_len, p.context.len())?;
            ensure_len("pretraining horizon length", config.horizon_len, p.horizon.len())?;
            Ok((p.normalized_context(), p.normalized_horizon()))
        })
        .collect::<Result<_>>()?;

    let hyper = AdamWHyper {
        lr: train.lr,
        weight_decay: train.weight_decay,
        ..AdamWHyper::default()
    };
    let mut opt = AdamWState::new(hyper, &params.tensor_lens());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_BACB);
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    let mut epoch_losses = vec![backbone_loss(&params, &normalized)];
    let batch = train.batch_size.max(1);

    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let lens = params.tensor_lens();
            let mut g = BackboneGrads {
                patch_w: vec![0.0; lens[0]],
                patch_b: vec![0.0; lens[1]],
                proj_w: vec![0.0; lens[2]],
                proj_b: vec![0.0; lens[3]],
            };
            for &i in chunk {
                let (x, y) = &normalized[i];
                pair_loss_and_grad(&params, x, y, Some(&mut g));
            }
            let scale = 1.0 / chunk.len() as f64;
            for t in [&mut g.patch_w, &mut g.patch_b, &mut g.proj_w, &mut g.proj_b] {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(
                &mut params.tensors_mut(),
                &[&g.patch_w, &g.patch_b, &g.proj_w, &g.proj_b],
            )?;
        }
        let loss = backbone_loss(&params, &normalized);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "backbone pretraining diverged at epoch {}",
                epoch_losses.len()
            )));
        }
        epoch_losses.push(loss);
    }
    params.frozen = true;
    Ok(PretrainOutcome {
        params,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_from_bank, make_pairs, Motif, MotifBank, MotifKind};

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            context_len: 32,
            horizon_len: 8,
            patch_len: 8,
            dim: 8,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.patch_len = 5;
        assert!(BackboneParams::init(c).is_err());
        let mut c = small_config();
        c.dim = 4;
        assert!(BackboneParams::init(c).is_err());
    }

    #[test]
    fn zero_context_with_zero_bias_embeds_to_zero() {
        let p = BackboneParams::init(small_config()).unwrap();
        assert_eq!(p.encode(&[0.0; 32]).unwrap(), vec![0.0; 8]);
        assert!(p.encode(&[0.0; 31]).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_bounded() {
        let p = BackboneParams::init(small_config()).unwrap();
        let q = BackboneParams::init(small_config()).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let e = p.encode(&x).unwrap();
        assert_eq!(e, q.encode(&x).unwrap());
        assert!(e.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn patch_permutation_leaves_embedding_unchanged() {
        let p = BackboneParams::init(small_config()).unwrap();
        let x: Vec<f64> = (0..32).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let mut permuted = Vec::new();
        for idx in [2, 0, 3, 1] {
            permuted.extend_from_slice(&x[idx * 8..(idx + 1) * 8]);
        }
        let a = p.encode(&x).unwrap();
        let b = p.encode(&permuted).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn project_is_affine() {
        let p = BackboneParams::init(small_config()).unwrap();
        assert_eq!(p.project(&[0.0; 8]).unwrap(), p.proj_b);
        let e: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let e2: Vec<f64> = e.iter().map(|v| v * 2.0).collect();
        let a = p.project(&e).unwrap();
        let b = p.project(&e2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        assert!(p.project(&[0.0; 7]).is_err());
    }

    #[test]
    fn head_weight_gradient_matches_central_differences() {
        let mut p = BackboneParams::init(small_config()).unwrap();
        p.patch_b.iter_mut().enumerate().for_each(|(i, b)| *b = 0.05 * i as f64);
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.2).sin()).collect();
        let lens = p.tensor_lens();
        let mut g = BackboneGrads {
            patch_w: vec![0.0; lens[0]],
            patch_b: vec![0.0; lens[1]],
            proj_w: vec![0.0; lens[2]],
            proj_b: vec![0.0; lens[3]],
        };
        pair_loss_and_grad(&p, &x, &y, Some(&mut g));
        let h = 1e-5;
        let check = |analytic: &[f64], which: usize| {
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = p.clone();
                plus.tensors_mut()[which][j] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[which][j] -= h;
                let fd = (pair_loss_and_grad(&plus, &x, &y, None)
                    - pair_loss_and_grad(&minus, &x, &y, None))
                    / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6 || (a - fd).abs() < 1e-10, "tensor {which}[{j}]: {a} vs {fd}");
            }
        };
        check(&g.proj_w, 2);
        check(&g.patch_w, 0);
    }

    fn sine_pairs() -> Vec<TimeSeriesPair> {
        let bank = MotifBank {
            motifs: vec![Motif {
                kind: MotifKind::Sine,
                period: 8,
                amplitude: 1.0,
            }],
        };
        generate_from_bank(&bank, 9, 4, 200, 0.0, "sine")
            .iter()
            .flat_map(|s| make_pairs(s, 32, 8, 4))
            .collect()
    }

    #[test]
    fn pretraining_loss_decreases_over_first_epochs() {
        let pairs = sine_pairs();
        let out = pretrain_backbone(
            &pairs,
            small_config(),
            &PretrainConfig {
                epochs: 10,
                lr: 1e-3,
                weight_decay: 0.0,
                batch_size: 16,
            },
        )
        .unwrap();
        assert!(out.params.frozen);
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let pairs = sine_pairs();
        let cfg = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        };
        let a = pretrain_backbone(&pairs, small_config(), &cfg).unwrap();
        let b = pretrain_backbone(&pairs, small_config(), &cfg).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert!(pretrain_backbone(&[], small_config(), &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut p = BackboneParams::init(small_config()).unwrap();
        p.frozen = true;
        let bytes = p.to_bytes();
        let back = BackboneParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(
            BackboneParams::from_bytes(&bad).unwrap_err().category(),
            crate::ErrorCategory::Format
        );
        assert_eq!(
            BackboneParams::from_bytes(&bytes[..bytes.len() - 3])
                .unwrap_err()
                .category(),
            crate::ErrorCategory::Format
        );
        let mut want = small_config();
        want.dim = 16;
        let err = BackboneParams::from_bytes_expecting(&bytes, &want).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::DimMismatch);
        let msg = err.to_string();
        assert!(msg.contains("16") && msg.contains('8'), "{msg}");
    }
}
