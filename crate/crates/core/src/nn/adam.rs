use std::io::{Read, Write};

use crate::error::Result;
use crate::nn::mlp::{read_f32, read_u32};
use crate::scalar::{real, Real};

/// Adam hyperparameters for one parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamConfig<T> {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr: real(lr),
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-15),
        }
    }
}

/// First/second moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// Rebuild moments after anchors were kept/added: `kept[i]` is the old
    /// anchor index of new anchor `i`, `added` fresh anchors get zero moments.
    /// `stride` = scalars per anchor. The step counter carries over.
    pub fn remap(&self, kept: &[usize], added: usize, stride: usize) -> AdamState<T> {
        let mut out = AdamState::new((kept.len() + added) * stride);
        out.step = self.step;
        for (new_i, &old_i) in kept.iter().enumerate() {
            let src = old_i * stride..(old_i + 1) * stride;
            let dst = new_i * stride..(new_i + 1) * stride;
            out.m[dst.clone()].copy_from_slice(&self.m[src.clone()]);
            out.v[dst].copy_from_slice(&self.v[src]);
        }
        out
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for v in self.m.iter().chain(self.v.iter()) {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let mut step = [0u8; 8];
        r.read_exact(&mut step)?;
        let len = read_u32(r)? as usize;
        let mut state = AdamState::new(len);
        state.step = u64::from_le_bytes(step);
        for i in 0..len {
            state.m[i] = real(read_f32(r)? as f64);
        }
        for i in 0..len {
            state.v[i] = real(read_f32(r)? as f64);
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update over a flat parameter tensor.
/// Gradients are consumed: the buffer is zeroed afterwards.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &mut [T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig<T>,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::one() - cfg.beta1.powi(t);
    let bc2 = T::one() - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (T::one() - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (T::one() - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        grads[i] = T::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_noop_on_params() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let mut g = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &mut g, &mut st, &AdamConfig::with_lr(0.1));
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes m_hat = v_hat = g on step 1, so the update is
        // lr * g / (|g| + eps) = lr in magnitude.
        let mut p = vec![0.5f64];
        let mut g = vec![1.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut p, &mut g, &mut st, &cfg);
        assert!((p[0] - 0.4).abs() < 1e-6);
        assert_eq!(g[0], 0.0, "gradients are cleared after the step");
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = vec![0.3f64, 0.3];
        let mut g = vec![0.7, 0.7];
        let mut st = AdamState::new(2);
        let cfg = AdamConfig::with_lr(0.01);
        for _ in 0..25 {
            adam_step(&mut p, &mut g, &mut st, &cfg);
            g = vec![0.7, 0.7];
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = vec![1.0f64, 2.0];
        let mut g = vec![0.5, -0.5];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &mut g, &mut st, &AdamConfig::with_lr(0.0));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn remap_keeps_and_zeroes() {
        let mut st = AdamState::new(6); // 3 anchors, stride 2
        st.step = 9;
        st.m = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        st.v = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let out = st.remap(&[2, 0], 1, 2);
        assert_eq!(out.step, 9);
        assert_eq!(out.m, vec![5.0, 6.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(out.v, vec![0.5, 0.6, 0.1, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let mut st = AdamState::new(4);
        st.step = 17;
        st.m = vec![0.5f32, -0.25, 0.125, 2.0];
        st.v = vec![1.0, 2.0, 3.0, 4.0];
        let mut buf = Vec::new();
        st.save(&mut buf).unwrap();
        let loaded = AdamState::<f32>::load(&mut buf.as_slice()).unwrap();
        assert_eq!(st, loaded);
    }
}
