//! Adam with bias correction.

use crate::error::{Error, Result};
use tensorcore::Tensor;

/// One Adam update on a flat parameter slice. `step` is the 1-based count
/// of updates applied so far *including this one* (bias correction uses
/// `beta^step`). Updates in place; fully deterministic.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::Config(format!(
            "adam_step shape mismatch: param {}, grad {}, m {}, v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let b1 = beta1 as f32;
    let b2 = beta2 as f32;
    let correction1 = 1.0 - beta1.powi(step as i32);
    let correction2 = 1.0 - beta2.powi(step as i32);
    // Fold both corrections into one scalar step size.
    let alpha = (lr / correction1) as f32;
    let corr2_sqrt = correction2.sqrt() as f32;
    let eps = eps as f32;
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        param[i] -= alpha * m[i] / (v[i].sqrt() / corr2_sqrt + eps);
    }
    Ok(())
}

/// First/second moment buffers for a whole parameter set, in the same
/// canonical tensor order the model exposes.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(tensors: &[&Tensor<f32>]) -> AdamState {
        AdamState {
            m: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update across all tensors. `grads[i]` must be shaped like
    /// tensor `i`; `None` entries (no gradient flowed) are treated as zero
    /// gradients, which still decay the moments.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Option<Vec<f32>>],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "adam state tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let zero_cache: Vec<f32> = Vec::new();
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let gslice: &[f32] = match g {
                Some(g) => g.as_slice(),
                None => &zero_cache,
            };
            if gslice.is_empty() {
                // Zero gradient: moments decay, parameters move by the
                // decayed momentum.
                let zeros = vec![0.0; p.numel()];
                adam_step(p.data_mut(), &zeros, m, v, self.step, lr, beta1, beta2, eps)?;
            } else {
                adam_step(p.data_mut(), gslice, m, v, self.step, lr, beta1, beta2, eps)?;
            }
        }
        Ok(())
    }
}

/// Global gradient-norm clipping: scales all gradients so their joint
/// L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &x in g {
            sq += (x as f64) * (x as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
