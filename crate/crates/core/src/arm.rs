//! Adaptive Retrieval Mixer.
//!
//! Retrieved horizons are projected to the embedding space, stacked under the
//! query embedding, contextualized by multi-head self-attention and an FFN
//! (both residual), scored row-wise, softmax-mixed and added back onto the
//! query embedding:
//!
//! ```text
//! E_ret    = MLP(y_1..y_k)                       k × d
//! X        = [e_q; E_ret]                        (k+1) × d
//! E_att    = MHA(X) + X
//! E_ffn    = Dropout(FFN(E_att)) + E_att
//! α        = softmax(E_ffn · w_g + b_g)          k+1
//! e_final  = e_q + Σ_i α_i E_ffn,i
//! ```
//!
//! Gradients are derived by hand for this fixed architecture. A gated
//! convex-combination baseline shares the same horizon projector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::error::{ensure_len, Error, Result};
use crate::linalg::{dot, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Default number of retrieved horizons.
    pub k: usize,
    pub dim: usize,
    pub horizon_len: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub proj_hidden: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl ArmConfig {
    /// Conventional sizes for a given embedding dimension and horizon length:
    /// 4 heads, FFN hidden 4d, projector hidden d, dropout 0.2, k = 10.
    pub fn for_dims(dim: usize, horizon_len: usize) -> Self {
        ArmConfig {
            k: 10,
            dim,
            horizon_len,
            heads: 4,
            ffn_hidden: 4 * dim,
            proj_hidden: dim,
            dropout_p: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.dim == 0 || self.horizon_len == 0 || self.ffn_hidden == 0 || self.proj_hidden == 0 {
            return Err(Error::InvalidArgument("ARM sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Two-layer ReLU MLP mapping each horizon (length L) to a d-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

struct ProjectorCache {
    inputs: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
}

impl Projector {
    fn init<R: Rng>(horizon_len: usize, hidden: usize, dim: usize, rng: &mut R) -> Self {
        Projector {
            w1: Matrix::uniform_fan_in(horizon_len, hidden, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::uniform_fan_in(hidden, dim, rng),
            b2: vec![0.0; dim],
        }
    }

    fn zeros_like(&self) -> Self {
        Projector {
            w1: Matrix::zeros(self.w1.rows, self.w1.cols),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows, self.w2.cols),
            b2: vec![0.0; self.b2.len()],
        }
    }

    fn forward(&self, horizons: &[&[f64]]) -> Result<(Matrix, ProjectorCache)> {
        let l = self.w1.rows;
        let mut inputs = Matrix::zeros(horizons.len(), l);
        for (i, h) in horizons.iter().enumerate() {
            ensure_len("retrieved horizon length", l, h.len())?;
            inputs.row_mut(i).copy_from_slice(h);
        }
        let mut hidden_pre = inputs.matmul(&self.w1);
        hidden_pre.add_row_vector(&self.b1);
        let hidden = relu(&hidden_pre);
        let mut out = hidden.matmul(&self.w2);
        out.add_row_vector(&self.b2);
        Ok((
            out,
            ProjectorCache {
                inputs,
                hidden_pre,
                hidden,
            },
        ))
    }

    fn backward(&self, cache: &ProjectorCache, d_out: &Matrix) -> Projector {
        let w2 = cache.hidden.t_matmul(d_out);
        let b2 = d_out.column_sums();
        let d_hidden = relu_backward(&cache.hidden_pre, &d_out.matmul_t(&self.w2));
        let w1 = cache.inputs.t_matmul(&d_hidden);
        let b1 = d_hidden.column_sums();
        Projector { w1, b1, w2, b2 }
    }

    /// Projects horizons to `E_ret` (k × d).
    pub fn project(&self, horizons: &[&[f64]]) -> Result<Matrix> {
        Ok(self.forward(horizons)?.0)
    }
}

fn relu(m: &Matrix) -> Matrix {
    Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|v| v.max(0.0)).collect())
}

fn relu_backward(pre: &Matrix, grad: &Matrix) -> Matrix {
    Matrix::from_vec(
        pre.rows,
        pre.cols,
        pre.data
            .iter()
            .zip(&grad.data)
            .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmParams {
    pub config: ArmConfig,
    pub projector: Projector,
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f64>,
    pub score_w: Vec<f64>,
    /// Length-1 vector so every tensor is a slice.
    pub score_b: Vec<f64>,
}

pub const ARM_TENSOR_NAMES: [&str; 18] = [
    "proj_w1", "proj_b1", "proj_w2", "proj_b2", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o",
    "b_o", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "score_w", "score_b",
];

/// Weights ~ U(±1/√fan_in), biases zero.
pub fn init_arm(config: ArmConfig) -> Result<ArmParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let projector = Projector::init(config.horizon_len, config.proj_hidden, d, &mut rng);
    Ok(ArmParams {
        config,
        projector,
        w_q: Matrix::uniform_fan_in(d, d, &mut rng),
        b_q: vec![0.0; d],
        w_k: Matrix::uniform_fan_in(d, d, &mut rng),
        b_k: vec![0.0; d],
        w_v: Matrix::uniform_fan_in(d, d, &mut rng),
        b_v: vec![0.0; d],
        w_o: Matrix::uniform_fan_in(d, d, &mut rng),
        b_o: vec![0.0; d],
        ffn_w1: Matrix::uniform_fan_in(d, config.ffn_hidden, &mut rng),
        ffn_b1: vec![0.0; config.ffn_hidden],
        ffn_w2: Matrix::uniform_fan_in(config.ffn_hidden, d, &mut rng),
        ffn_b2: vec![0.0; d],
        score_w: Matrix::uniform_fan_in(d, 1, &mut rng).data,
        score_b: vec![0.0],
    })
}

impl ArmParams {
    pub fn tensors(&self) -> [&[f64]; 18] {
        [
            &self.projector.w1.data,
            &self.projector.b1,
            &self.projector.w2.data,
            &self.projector.b2,
            &self.w_q.data,
            &self.b_q,
            &self.w_k.data,
            &self.b_k,
            &self.w_v.data,
            &self.b_v,
            &self.w_o.data,
            &self.b_o,
            &self.ffn_w1.data,
            &self.ffn_b1,
            &self.ffn_w2.data,
            &self.ffn_b2,
            &self.score_w,
            &self.score_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 18] {
        [
            &mut self.projector.w1.data,
            &mut self.projector.b1,
            &mut self.projector.w2.data,
            &mut self.projector.b2,
            &mut self.w_q.data,
            &mut self.b_q,
            &mut self.w_k.data,
            &mut self.b_k,
            &mut self.w_v.data,
            &mut self.b_v,
            &mut self.w_o.data,
            &mut self.b_o,
            &mut self.ffn_w1.data,
            &mut self.ffn_b1,
            &mut self.ffn_w2.data,
            &mut self.ffn_b2,
            &mut self.score_w,
            &mut self.score_b,
        ]
    }

    pub fn zeros_like(&self) -> ArmParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn encode_into(&self, e: &mut Encoder) {
        let c = &self.config;
        for v in [c.k, c.dim, c.horizon_len, c.heads, c.ffn_hidden, c.proj_hidden] {
            e.usize(v);
        }
        e.f64(c.dropout_p);
        e.u64(c.seed);
        for t in self.tensors() {
            e.vector(t);
        }
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        let config = ArmConfig {
            k: d.usize()?,
            dim: d.usize()?,
            horizon_len: d.usize()?,
            heads: d.usize()?,
            ffn_hidden: d.usize()?,
            proj_hidden: d.usize()?,
            dropout_p: d.f64()?,
            seed: d.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("ARM parameters: {e}")))?;
        let mut params = init_arm(config)?;
        for (name, t) in ARM_TENSOR_NAMES.iter().zip(params.tensors_mut()) {
            let v = d.vector_sized(name, t.len())?;
            t.copy_from_slice(&v);
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active; the mask is drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

/// Intermediate tensors of one forward pass, kept for backprop and for
/// inspecting the mixing weights.
#[derive(Debug, Clone)]
pub struct ArmTrace {
    pub query: Vec<f64>,
    /// k × d
    pub e_ret: Matrix,
    /// (k+1) × d, query embedding in row 0
    pub e_concat: Matrix,
    pub q: Matrix,
    pub k_mat: Matrix,
    pub v: Matrix,
    /// One (k+1) × (k+1) attention matrix per head.
    pub attention: Vec<Matrix>,
    /// Concatenated head outputs before the output projection.
    pub heads_out: Matrix,
    pub e_att: Matrix,
    pub ffn_hidden_pre: Matrix,
    pub ffn_out: Matrix,
    /// Inverted-dropout multipliers (0 or 1/(1−p)); `None` when dropout is off.
    pub dropout_mask: Option<Vec<f64>>,
    pub e_ffn: Matrix,
    pub scores: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `Σ α_i E_ffn,i`
    pub mixed: Vec<f64>,
    pub e_final: Vec<f64>,
    projector_cache: Option<ProjectorCache>,
}

impl std::fmt::Debug for ProjectorCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectorCache").finish_non_exhaustive()
    }
}

impl Clone for ProjectorCache {
    fn clone(&self) -> Self {
        ProjectorCache {
            inputs: self.inputs.clone(),
            hidden_pre: self.hidden_pre.clone(),
            hidden: self.hidden.clone(),
        }
    }
}

fn head_cols(m: &Matrix, h: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows, dh);
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_cols(dst: &mut Matrix, src: &Matrix, h: usize, dh: usize) {
    for i in 0..dst.rows {
        for (a, b) in dst.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(src.row(i)) {
            *a += b;
        }
    }
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = x.matmul(w);
    out.add_row_vector(b);
    out
}

pub fn arm_forward(
    params: &ArmParams,
    query: &[f64],
    horizons: &[&[f64]],
    mode: ForwardMode,
) -> Result<ArmTrace> {
    let c = &params.config;
    let d = c.dim;
    ensure_len("ARM query embedding dim", d, query.len())?;

    let (e_ret, projector_cache) = if horizons.is_empty() {
        (Matrix::zeros(0, d), None)
    } else {
        let (m, cache) = params.projector.forward(horizons)?;
        (m, Some(cache))
    };
    let n = horizons.len() + 1;
    let mut e_concat = Matrix::zeros(n, d);
    e_concat.row_mut(0).copy_from_slice(query);
    for i in 0..horizons.len() {
        e_concat.row_mut(i + 1).copy_from_slice(e_ret.row(i));
    }

    let q = affine(&e_concat, &params.w_q, &params.b_q);
    let k_mat = affine(&e_concat, &params.w_k, &params.b_k);
    let v = affine(&e_concat, &params.w_v, &params.b_v);
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = Matrix::zeros(n, d);
    let mut attention = Vec::with_capacity(c.heads);
    for h in 0..c.heads {
        let qh = head_cols(&q, h, dh);
        let kh = head_cols(&k_mat, h, dh);
        let vh = head_cols(&v, h, dh);
        let mut scores = qh.matmul_t(&kh);
        for i in 0..n {
            let probs = softmax(&scores.row(i).iter().map(|s| s * scale).collect::<Vec<_>>());
            scores.row_mut(i).copy_from_slice(&probs);
        }
        add_head_cols(&mut heads_out, &scores.matmul(&vh), h, dh);
        attention.push(scores);
    }
    let mut e_att = affine(&heads_out, &params.w_o, &params.b_o);
    e_att.add_assign(&e_concat);

    let ffn_hidden_pre = affine(&e_att, &params.ffn_w1, &params.ffn_b1);
    let ffn_out = affine(&relu(&ffn_hidden_pre), &params.ffn_w2, &params.ffn_b2);
    let dropout_mask = match mode {
        ForwardMode::Train { seed } if c.dropout_p > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - c.dropout_p);
            Some(
                (0..ffn_out.data.len())
                    .map(|_| if rng.gen::<f64>() < c.dropout_p { 0.0 } else { keep })
                    .collect::<Vec<f64>>(),
            )
        }
        _ => None,
    };
    let mut e_ffn = ffn_out.clone();
    if let Some(mask) = &dropout_mask {
        for (x, m) in e_ffn.data.iter_mut().zip(mask) {
            *x *= m;
        }
    }
    e_ffn.add_assign(&e_att);

    let scores: Vec<f64> = (0..n)
        .map(|i| dot(e_ffn.row(i), &params.score_w) + params.score_b[0])
        .collect();
    let alpha = softmax(&scores);
    let mut mixed = vec![0.0; d];
    for (i, a) in alpha.iter().enumerate() {
        for (m, x) in mixed.iter_mut().zip(e_ffn.row(i)) {
            *m += a * x;
        }
    }
    let e_final = query.iter().zip(&mixed).map(|(q, m)| q + m).collect();

    Ok(ArmTrace {
        query: query.to_vec(),
        e_ret,
        e_concat,
        q,
        k_mat,
        v,
        attention,
        heads_out,
        e_att,
        ffn_hidden_pre,
        ffn_out,
        dropout_mask,
        e_ffn,
        scores,
        alpha,
        mixed,
        e_final,
        projector_cache,
    })
}

/// Gradients of a scalar loss given `d_final = ∂loss/∂e_final`.
#[derive(Debug, Clone)]
pub struct ArmGradients {
    pub params: ArmParams,
    pub query: Vec<f64>,
}

pub fn arm_backward(params: &ArmParams, trace: &ArmTrace, d_final: &[f64]) -> Result<ArmGradients> {
    let c = &params.config;
    let d = c.dim;
    ensure_len("ARM upstream gradient dim", d, d_final.len())?;
    ensure_len("ARM trace dim", d, trace.e_ffn.cols)?;
    ensure_len("ARM trace heads", c.heads, trace.attention.len())?;
    ensure_len("ARM trace ffn width", c.ffn_hidden, trace.ffn_hidden_pre.cols)?;
    let n = trace.e_ffn.rows;
    let mut g = params.zeros_like();

    // e_final = q + Σ α_i E_ffn,i ; α = softmax(s) ; s_i = E_ffn,i · w_g + b_g
    let mut d_query: Vec<f64> = d_final.to_vec();
    let proj: Vec<f64> = (0..n).map(|i| dot(d_final, trace.e_ffn.row(i))).collect();
    let weighted: f64 = trace.alpha.iter().zip(&proj).map(|(a, p)| a * p).sum();
    let d_scores: Vec<f64> = trace
        .alpha
        .iter()
        .zip(&proj)
        .map(|(a, p)| a * (p - weighted))
        .collect();
    let mut d_effn = Matrix::zeros(n, d);
    for i in 0..n {
        let row = d_effn.row_mut(i);
        for j in 0..d {
            row[j] = trace.alpha[i] * d_final[j] + d_scores[i] * params.score_w[j];
        }
        for (gw, x) in g.score_w.iter_mut().zip(trace.e_ffn.row(i)) {
            *gw += d_scores[i] * x;
        }
        g.score_b[0] += d_scores[i];
    }

    // E_ffn = mask ⊙ FFN(E_att) + E_att
    let mut d_eatt = d_effn.clone();
    let mut d_ffn_out = d_effn;
    if let Some(mask) = &trace.dropout_mask {
        for (x, m) in d_ffn_out.data.iter_mut().zip(mask) {
            *x *= m;
        }
    }
    let hidden = relu(&trace.ffn_hidden_pre);
    g.ffn_w2 = hidden.t_matmul(&d_ffn_out);
    g.ffn_b2 = d_ffn_out.column_sums();
    let d_hidden = relu_backward(&trace.ffn_hidden_pre, &d_ffn_out.matmul_t(&params.ffn_w2));
    g.ffn_w1 = trace.e_att.t_matmul(&d_hidden);
    g.ffn_b1 = d_hidden.column_sums();
    d_eatt.add_assign(&d_hidden.matmul_t(&params.ffn_w1));

    // E_att = heads · W_o + b_o + X
    let mut d_x = d_eatt.clone();
    g.w_o = trace.heads_out.t_matmul(&d_eatt);
    g.b_o = d_eatt.column_sums();
    let d_heads = d_eatt.matmul_t(&params.w_o);

    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = Matrix::zeros(n, d);
    let mut d_k = Matrix::zeros(n, d);
    let mut d_v = Matrix::zeros(n, d);
    for (h, attn) in trace.attention.iter().enumerate() {
        let qh = head_cols(&trace.q, h, dh);
        let kh = head_cols(&trace.k_mat, h, dh);
        let vh = head_cols(&trace.v, h, dh);
        let d_oh = head_cols(&d_heads, h, dh);
        let d_attn = d_oh.matmul_t(&vh);
        add_head_cols(&mut d_v, &attn.t_matmul(&d_oh), h, dh);
        let mut d_s = Matrix::zeros(n, n);
        for i in 0..n {
            let a = attn.row(i);
            let da = d_attn.row(i);
            let inner = dot(a, da);
            for (j, ds) in d_s.row_mut(i).iter_mut().enumerate() {
                *ds = a[j] * (da[j] - inner) * scale;
            }
        }
        add_head_cols(&mut d_q, &d_s.matmul(&kh), h, dh);
        add_head_cols(&mut d_k, &d_s.t_matmul(&qh), h, dh);
    }
    g.w_q = trace.e_concat.t_matmul(&d_q);
    g.b_q = d_q.column_sums();
    g.w_k = trace.e_concat.t_matmul(&d_k);
    g.b_k = d_k.column_sums();
    g.w_v = trace.e_concat.t_matmul(&d_v);
    g.b_v = d_v.column_sums();
    d_x.add_assign(&d_q.matmul_t(&params.w_q));
    d_x.add_assign(&d_k.matmul_t(&params.w_k));
    d_x.add_assign(&d_v.matmul_t(&params.w_v));

    for (dq, dx) in d_query.iter_mut().zip(d_x.row(0)) {
        *dq += dx;
    }
    if let Some(cache) = &trace.projector_cache {
        let mut d_ret = Matrix::zeros(n - 1, d);
        for i in 1..n {
            d_ret.row_mut(i - 1).copy_from_slice(d_x.row(i));
        }
        g.projector = params.projector.backward(cache, &d_ret);
    }
    Ok(ArmGradients {
        params: g,
        query: d_query,
    })
}

/// Baseline fusion: `σ(g)·e_q + (1−σ(g))·mean(E_ret)` with a learnable scalar gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub config: ArmConfig,
    pub projector: Projector,
    /// Length-1 vector holding the gate logit.
    pub gate: Vec<f64>,
}

pub const GATE_TENSOR_NAMES: [&str; 5] = ["proj_w1", "proj_b1", "proj_w2", "proj_b2", "gate"];

pub fn init_gate(config: ArmConfig) -> Result<GateParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(GateParams {
        config,
        projector: Projector::init(config.horizon_len, config.proj_hidden, config.dim, &mut rng),
        gate: vec![0.0],
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct GateTrace {
    pub query: Vec<f64>,
    pub mean_ret: Vec<f64>,
    pub weight: f64,
    pub e_final: Vec<f64>,
    projector_cache: Option<ProjectorCache>,
}

impl GateParams {
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.projector.w1.data,
            &self.projector.b1,
            &self.projector.w2.data,
            &self.projector.b2,
            &self.gate,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.projector.w1.data,
            &mut self.projector.b1,
            &mut self.projector.w2.data,
            &mut self.projector.b2,
            &mut self.gate,
        ]
    }

    fn encode_into(&self, e: &mut Encoder) {
        let c = &self.config;
        for v in [c.k, c.dim, c.horizon_len, c.heads, c.ffn_hidden, c.proj_hidden] {
            e.usize(v);
        }
        e.f64(c.dropout_p);
        e.u64(c.seed);
        for t in self.tensors() {
            e.vector(t);
        }
    }

    fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        let config = ArmConfig {
            k: d.usize()?,
            dim: d.usize()?,
            horizon_len: d.usize()?,
            heads: d.usize()?,
            ffn_hidden: d.usize()?,
            proj_hidden: d.usize()?,
            dropout_p: d.f64()?,
            seed: d.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("gate parameters: {e}")))?;
        let mut params = init_gate(config)?;
        for (name, t) in GATE_TENSOR_NAMES.iter().zip(params.tensors_mut()) {
            let v = d.vector_sized(name, t.len())?;
            t.copy_from_slice(&v);
        }
        Ok(params)
    }
}

pub fn gated_fusion_forward(params: &GateParams, query: &[f64], horizons: &[&[f64]]) -> Result<GateTrace> {
    let d = params.config.dim;
    ensure_len("gate query embedding dim", d, query.len())?;
    if horizons.is_empty() {
        return Ok(GateTrace {
            query: query.to_vec(),
            mean_ret: vec![0.0; d],
            weight: 1.0,
            e_final: query.to_vec(),
            projector_cache: None,
        });
    }
    let (e_ret, cache) = params.projector.forward(horizons)?;
    let k = horizons.len() as f64;
    let mean_ret: Vec<f64> = e_ret.column_sums().into_iter().map(|s| s / k).collect();
    let weight = sigmoid(params.gate[0]);
    let e_final = query
        .iter()
        .zip(&mean_ret)
        .map(|(q, m)| weight * q + (1.0 - weight) * m)
        .collect();
    Ok(GateTrace {
        query: query.to_vec(),
        mean_ret,
        weight,
        e_final,
        projector_cache: Some(cache),
    })
}

pub struct GateGradients {
    pub params: GateParams,
    pub query: Vec<f64>,
}

pub fn gated_fusion_backward(params: &GateParams, trace: &GateTrace, d_final: &[f64]) -> Result<GateGradients> {
    ensure_len("gate upstream gradient dim", params.config.dim, d_final.len())?;
    let mut g = GateParams {
        config: params.config,
        projector: params.projector.zeros_like(),
        gate: vec![0.0],
    };
    let Some(cache) = &trace.projector_cache else {
        return Ok(GateGradients {
            params: g,
            query: d_final.to_vec(),
        });
    };
    let w = trace.weight;
    g.gate[0] = trace
        .query
        .iter()
        .zip(&trace.mean_ret)
        .zip(d_final)
        .map(|((q, m), df)| df * (q - m))
        .sum::<f64>()
        * w
        * (1.0 - w);
    let k = cache.inputs.rows;
    let mut d_ret = Matrix::zeros(k, params.config.dim);
    for i in 0..k {
        for (x, df) in d_ret.row_mut(i).iter_mut().zip(d_final) {
            *x = (1.0 - w) * df / k as f64;
        }
    }
    g.projector = params.projector.backward(cache, &d_ret);
    Ok(GateGradients {
        params: g,
        query: d_final.iter().map(|df| w * df).collect(),
    })
}

/// Either fusion module, as stored in an engine checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Arm(ArmParams),
    Gate(GateParams),
}

/// Output of a fusion forward pass together with what is needed to backprop.
#[derive(Debug, Clone)]
pub enum FusionTrace {
    Arm(ArmTrace),
    Gate(GateTrace),
}

impl FusionTrace {
    pub fn e_final(&self) -> &[f64] {
        match self {
            FusionTrace::Arm(t) => &t.e_final,
            FusionTrace::Gate(t) => &t.e_final,
        }
    }

    /// Mixing weights over [query, retrieved...]. For the gate this is
    /// `[σ(g), (1−σ(g))/k, ...]`.
    pub fn weights(&self) -> Vec<f64> {
        match self {
            FusionTrace::Arm(t) => t.alpha.clone(),
            FusionTrace::Gate(t) => {
                let k = t.projector_cache.as_ref().map_or(0, |c| c.inputs.rows);
                let mut w = vec![t.weight];
                w.extend(std::iter::repeat((1.0 - t.weight) / k.max(1) as f64).take(k));
                w
            }
        }
    }
}

impl Fusion {
    pub fn kind(&self) -> &'static str {
        match self {
            Fusion::Arm(_) => "arm",
            Fusion::Gate(_) => "gate",
        }
    }

    pub fn config(&self) -> &ArmConfig {
        match self {
            Fusion::Arm(p) => &p.config,
            Fusion::Gate(p) => &p.config,
        }
    }

    pub fn forward(&self, query: &[f64], horizons: &[&[f64]], mode: ForwardMode) -> Result<FusionTrace> {
        Ok(match self {
            Fusion::Arm(p) => FusionTrace::Arm(arm_forward(p, query, horizons, mode)?),
            Fusion::Gate(p) => FusionTrace::Gate(gated_fusion_forward(p, query, horizons)?),
        })
    }

    /// Parameter gradients flattened in tensor order.
    pub fn backward(&self, trace: &FusionTrace, d_final: &[f64]) -> Result<Vec<Vec<f64>>> {
        match (self, trace) {
            (Fusion::Arm(p), FusionTrace::Arm(t)) => Ok(arm_backward(p, t, d_final)?
                .params
                .tensors()
                .iter()
                .map(|t| t.to_vec())
                .collect()),
            (Fusion::Gate(p), FusionTrace::Gate(t)) => Ok(gated_fusion_backward(p, t, d_final)?
                .params
                .tensors()
                .iter()
                .map(|t| t.to_vec())
                .collect()),
            _ => Err(Error::InvalidArgument(
                "fusion trace does not match fusion module".into(),
            )),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Fusion::Arm(p) => p.tensors().to_vec(),
            Fusion::Gate(p) => p.tensors().to_vec(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Fusion::Arm(p) => p.tensors_mut().into_iter().collect(),
            Fusion::Gate(p) => p.tensors_mut().into_iter().collect(),
        }
    }

    pub fn tensor_names(&self) -> &'static [&'static str] {
        match self {
            Fusion::Arm(_) => &ARM_TENSOR_NAMES,
            Fusion::Gate(_) => &GATE_TENSOR_NAMES,
        }
    }

    pub(crate) fn encode_into(&self, e: &mut Encoder) {
        match self {
            Fusion::Arm(p) => {
                e.u8(0);
                p.encode_into(e);
            }
            Fusion::Gate(p) => {
                e.u8(1);
                p.encode_into(e);
            }
        }
    }

    pub(crate) fn decode_from(d: &mut Decoder<'_>) -> Result<Self> {
        match d.u8()? {
            0 => Ok(Fusion::Arm(ArmParams::decode_from(d)?)),
            1 => Ok(Fusion::Gate(GateParams::decode_from(d)?)),
            other => Err(Error::Format(format!("unknown fusion kind {other}"))),
        }
    }
}
