//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::tape::ParamSet;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state. Moment buffers mirror the parameter set entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            cfg,
        }
    }
}

/// One bias-corrected Adam update (no weight decay). Gradients are zeroed
/// afterwards.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad.is_none() {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (k, (_, t)) in params.iter_mut().enumerate() {
        let grad = t.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, g)) in t.data_mut().iter_mut().zip(&grad).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        t.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}

/// Global L2 norm of a set of gradient buffers.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all buffers by `threshold / norm` when the global norm exceeds
/// `threshold`. Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = global_norm(grads.iter().map(|g| &**g));
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// [`clip_global_norm`] over the gradient slots of a parameter set.
pub fn clip_param_grads(params: &mut ParamSet, threshold: f64) -> f64 {
    let mut bufs: Vec<&mut [f64]> = params
        .iter_mut()
        .filter_map(|(_, t)| t.grad.as_deref_mut())
        .collect();
    clip_global_norm(&mut bufs, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn clip_scales_down_large_norm() {
        let mut g = vec![12.0, 16.0];
        let n = clip_global_norm(&mut [&mut g[..]], 10.0);
        assert_eq!(n, 20.0);
        assert_eq!(g, vec![6.0, 8.0]);
    }

    #[test]
    fn clip_leaves_small_norm() {
        let mut g = vec![0.0, 3.0];
        clip_global_norm(&mut [&mut g[..]], 10.0);
        assert_eq!(g, vec![0.0, 3.0]);
    }

    #[test]
    fn clip_uses_global_norm_across_params() {
        let mut a = vec![6.0];
        let mut b = vec![0.0, 8.0];
        let n = clip_global_norm(&mut [&mut a[..], &mut b[..]], 5.0);
        assert_eq!(n, 10.0);
        assert_eq!(a, vec![3.0]);
        assert_eq!(b, vec![0.0, 4.0]);
    }

    #[test]
    fn clip_empty_set_reports_zero() {
        assert_eq!(clip_global_norm(&mut [], 10.0), 0.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamSet::new();
        let w = p.insert("w", Tensor::scalar(1.0));
        p.get_mut(w).grad = Some(vec![-2.5]);
        let mut st = AdamState::new(&p, AdamConfig { lr: 0.1, eps: 1e-12, ..Default::default() });
        adam_step(&mut p, &mut st).unwrap();
        assert!((p.get(w).item() - 1.1).abs() < 1e-9);
        assert_eq!(p.get(w).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_grad_leaves_param_but_counts_step() {
        let mut p = ParamSet::new();
        let w = p.insert("w", Tensor::vector(vec![0.3, -0.7]));
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            p.get_mut(w).zero_grad();
            adam_step(&mut p, &mut st).unwrap();
        }
        assert_eq!(p.get(w).data(), &[0.3, -0.7]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn missing_grad_names_param() {
        let mut p = ParamSet::new();
        p.insert("encoder.proj.weight", Tensor::scalar(0.0));
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert_eq!(
            adam_step(&mut p, &mut st),
            Err(TensorError::MissingGrad("encoder.proj.weight".into()))
        );
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let mut p = ParamSet::new();
        let w = p.insert("w", Tensor::scalar(0.0));
        let mut st = AdamState::new(&p, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..200 {
            let mut tape = Tape::new();
            let wv = tape.param(&p, w);
            let three = tape.constant(Tensor::scalar(3.0));
            let d = tape.sub(wv, three).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let grads = tape.backward(sq).unwrap();
            p.zero_grads();
            grads.accumulate_into(&mut p);
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!((p.get(w).item() - 3.0).abs() < 0.05, "w = {}", p.get(w).item());
    }
}
