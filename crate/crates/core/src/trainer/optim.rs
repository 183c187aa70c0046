use crate::arch::Parameters;
use crate::autodiff::global_grad_norm;

use super::config::TrainConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction at 1-based step `t`; decoupled
/// weight decay when `weight_decay > 0`.
pub fn adam_step(
    params: &mut Parameters<f32>,
    m: &mut Parameters<f32>,
    v: &mut Parameters<f32>,
    grads: &Parameters<f32>,
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powf(t as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(t as f64);
    let moments = m.iter_mut().zip(v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mut x = p[i] as f64;
            if weight_decay > 0.0 {
                x *= 1.0 - lr * weight_decay;
            }
            x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            p[i] = x as f32;
        }
    }
}

/// `ema <- rate * ema + (1 - rate) * params`.
pub fn ema_update(ema: &mut Parameters<f32>, params: &Parameters<f32>, rate: f64) {
    for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e = (rate * *e as f64 + (1.0 - rate) * p as f64) as f32;
        }
    }
}

pub fn grads_norm(grads: &Parameters<f32>) -> f64 {
    let slices: Vec<&[f32]> = grads.iter().map(|(_, t)| t.data()).collect();
    global_grad_norm(&slices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    Skipped,
}

/// Whether an update with this gradient norm must be discarded. Equality
/// with the threshold is allowed.
pub fn should_skip(grad_norm: f64, threshold: f64) -> bool {
    grad_norm.is_nan() || grad_norm > threshold
}

/// Apply Adam and the EMA unless the gradient norm calls for a skip, in
/// which case nothing changes.
#[allow(clippy::too_many_arguments)]
pub fn maybe_skip_update(
    params: &mut Parameters<f32>,
    m: &mut Parameters<f32>,
    v: &mut Parameters<f32>,
    ema: &mut Parameters<f32>,
    grads: &Parameters<f32>,
    grad_norm: f64,
    applied_before: u64,
    cfg: &TrainConfig,
) -> UpdateOutcome {
    if should_skip(grad_norm, cfg.skip_threshold) {
        return UpdateOutcome::Skipped;
    }
    adam_step(params, m, v, grads, applied_before + 1, cfg.learning_rate, cfg.weight_decay);
    ema_update(ema, params, cfg.ema_rate);
    UpdateOutcome::Applied
}
