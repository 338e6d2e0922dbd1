//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsrag::arm::{
    arm_backward, arm_forward, gated_fusion_backward, gated_fusion_forward, init_arm, init_gate,
    ArmConfig, ArmParams, ForwardMode, GateParams, ARM_TENSOR_NAMES, GATE_TENSOR_NAMES,
};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a 1e-6 floor on the scale: gradients that are zero in
/// exact arithmetic (e.g. the key bias under softmax shift invariance) show up
/// as ~1e-11 finite-difference noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn grad_config(seed: u64) -> ArmConfig {
    ArmConfig {
        k: 3,
        dim: 8,
        horizon_len: 12,
        heads: 2,
        ffn_hidden: 16,
        proj_hidden: 8,
        dropout_p: 0.0,
        seed,
    }
}

pub struct Case {
    pub query: Vec<f64>,
    pub horizons: Vec<Vec<f64>>,
    /// Upstream gradient; the loss is `<e_final, upstream>`.
    pub upstream: Vec<f64>,
}

impl Case {
    pub fn random(seed: u64, k: usize, c: &ArmConfig) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        Case {
            query: (0..c.dim).map(|_| rng.gen_range(-0.9..0.9)).collect(),
            horizons: (0..k)
                .map(|_| (0..c.horizon_len).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect(),
            upstream: (0..c.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    pub fn horizon_refs(&self) -> Vec<&[f64]> {
        self.horizons.iter().map(|v| v.as_slice()).collect()
    }
}

/// Initial parameters plus noise, so no tensor sits at a special point.
pub fn perturbed_arm(config: ArmConfig, noise_seed: u64) -> ArmParams {
    let mut p = init_arm(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

fn arm_loss(p: &ArmParams, query: &[f64], c: &Case, mode: ForwardMode) -> f64 {
    let t = arm_forward(p, query, &c.horizon_refs(), mode).unwrap();
    t.e_final.iter().zip(&c.upstream).map(|(e, u)| e * u).sum()
}

/// Worst relative error per ARM tensor (in `ARM_TENSOR_NAMES` order) and for
/// the query gradient, against central differences.
pub fn arm_fd_errors(p: &ArmParams, c: &Case, mode: ForwardMode) -> (Vec<(&'static str, f64)>, f64) {
    let trace = arm_forward(p, &c.query, &c.horizon_refs(), mode).unwrap();
    let grads = arm_backward(p, &trace, &c.upstream).unwrap();
    let per_tensor = ARM_TENSOR_NAMES
        .iter()
        .enumerate()
        .map(|(ti, name)| {
            let worst = grads.params.tensors()[ti]
                .iter()
                .enumerate()
                .map(|(j, &a)| {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti][j] += FD_STEP;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti][j] -= FD_STEP;
                    let fd = (arm_loss(&plus, &c.query, c, mode) - arm_loss(&minus, &c.query, c, mode))
                        / (2.0 * FD_STEP);
                    rel_err(a, fd)
                })
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect();
    let query_worst = (0..c.query.len())
        .map(|j| {
            let mut qp = c.query.clone();
            qp[j] += FD_STEP;
            let mut qm = c.query.clone();
            qm[j] -= FD_STEP;
            let fd = (arm_loss(p, &qp, c, mode) - arm_loss(p, &qm, c, mode)) / (2.0 * FD_STEP);
            rel_err(grads.query[j], fd)
        })
        .fold(0.0, f64::max);
    (per_tensor, query_worst)
}

fn gate_loss(p: &GateParams, c: &Case) -> f64 {
    let t = gated_fusion_forward(p, &c.query, &c.horizon_refs()).unwrap();
    t.e_final.iter().zip(&c.upstream).map(|(e, u)| e * u).sum()
}

/// Gate parameters with a seed-dependent gate logit away from zero.
pub fn gate_for_seed(seed: u64) -> GateParams {
    let mut p = init_gate(grad_config(seed)).unwrap();
    p.gate[0] = 0.3 * seed as f64 - 0.5;
    p
}

/// Worst relative error per gate tensor.
pub fn gate_fd_errors(p: &GateParams, c: &Case) -> Vec<(&'static str, f64)> {
    let trace = gated_fusion_forward(p, &c.query, &c.horizon_refs()).unwrap();
    let grads = gated_fusion_backward(p, &trace, &c.upstream).unwrap();
    GATE_TENSOR_NAMES
        .iter()
        .enumerate()
        .map(|(ti, name)| {
            let worst = grads.params.tensors()[ti]
                .iter()
                .enumerate()
                .map(|(j, &a)| {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti][j] += FD_STEP;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti][j] -= FD_STEP;
                    let fd = (gate_loss(&plus, c) - gate_loss(&minus, c)) / (2.0 * FD_STEP);
                    rel_err(a, fd)
                })
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
