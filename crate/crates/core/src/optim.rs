//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::policy::{OptimizerState, PolicyParams};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Clip `grad` in place to `clip_norm` (global L2 norm); returns the
/// pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], clip_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One AdamW step. Parameters and moments are re-quantized to f32 afterwards
/// so checkpoints round-trip exactly. Returns the pre-clip gradient norm.
pub fn adamw_step(
    cfg: &AdamWConfig,
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    grad: &mut [f64],
) -> f64 {
    assert_eq!(grad.len(), params.data.len());
    let norm = clip_global_norm(grad, cfg.clip_norm);
    opt.step += 1;
    let t = opt.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..grad.len() {
        opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * grad[i];
        opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        params.data[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)
            + cfg.weight_decay * params.data[i]);
    }
    params.quantize_f32();
    opt.quantize_f32();
    norm
}
