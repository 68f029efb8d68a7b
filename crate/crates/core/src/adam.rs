//! Adam optimizer with bias correction.

use crate::error::{CsError, Result};
use crate::params::Param;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers are kept per parameter index, so the same parameter list
/// (same order, same shapes) must be passed to every step.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Apply one update from the gradients currently stored on `params`.
    /// Frozen parameters are left untouched, moments included.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(CsError::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if self.m[i].len() != p.value.numel() {
                return Err(CsError::Contract(format!(
                    "parameter {} changed size: moments hold {}, value has {}",
                    p.name,
                    self.m[i].len(),
                    p.value.numel()
                )));
            }
            let g = p.grad.data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = p.value.data_mut();
            for j in 0..value.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Flat view of the moment buffers, in parameter order, for
    /// checkpointing. First moments then second moments.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.m.iter().flatten().copied().collect(),
            self.v.iter().flatten().copied().collect(),
        )
    }

    /// Restore moments saved by [`Adam::moments`] for the given parameters.
    pub fn restore(
        &mut self,
        params: &[Param],
        m_flat: &[f64],
        v_flat: &[f64],
        step: u64,
    ) -> Result<()> {
        let total: usize = params.iter().map(|p| p.value.numel()).sum();
        if m_flat.len() != total || v_flat.len() != total {
            return Err(CsError::data(format!(
                "moment buffers hold {}/{} values, parameters need {}",
                m_flat.len(),
                v_flat.len(),
                total
            )));
        }
        self.m.clear();
        self.v.clear();
        let mut off = 0;
        for p in params {
            let n = p.value.numel();
            self.m.push(m_flat[off..off + n].to_vec());
            self.v.push(v_flat[off..off + n].to_vec());
            off += n;
        }
        self.step = step;
        Ok(())
    }
}
