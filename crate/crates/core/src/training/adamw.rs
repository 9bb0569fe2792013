use crate::tensor::Tensor;

use super::{Result, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Moment estimates for one parameter list, kept in f64.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One AdamW update over `params`, reading each tensor's gradient slot (an
/// empty slot counts as zero). Clipping uses the global norm over all
/// gradients; weight decay is decoupled from the adaptive step.
pub fn adamw_step(params: &mut [&mut Tensor], state: &mut AdamWState, config: &AdamWConfig) -> Result<StepStats> {
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(TrainError::Config("optimizer state does not match parameter list".into()));
    }
    let mut sq = 0.0f64;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let clip = match config.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad().map(<[f32]>::to_vec);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[i] as f64) * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + config.eps);
            let w64 = *w as f64;
            *w = (w64 - lr * (update + config.weight_decay * w64)) as f32;
        }
    }
    Ok(StepStats {
        grad_norm,
        clipped: clip < 1.0,
    })
}
