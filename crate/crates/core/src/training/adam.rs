//! Adam with bias correction over the two embedding tables.

use crate::error::{Result, SorexError};
use crate::tensor::Matrix;
use crate::towers::{Embeddings, Tower};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per table entry plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: [Matrix; 2],
    pub v: [Matrix; 2],
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        let z = || Matrix::zeros(rows, cols);
        AdamState { step: 0, m: [z(), z()], v: [z(), z()] }
    }

    /// Applies one update. Non-finite gradients abort before any state or
    /// parameter changes.
    pub fn step(&mut self, params: &mut Embeddings, grads: [&Matrix; 2], hp: &AdamParams) -> Result<()> {
        for (tower, g) in Tower::BOTH.iter().zip(grads) {
            if !g.is_finite() {
                return Err(SorexError::NonFinite(format!("{} gradient at step {}", tower.as_str(), self.step + 1)));
            }
            assert_eq!(g.shape(), params.table(*tower).shape(), "gradient shape");
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        for (i, g) in grads.into_iter().enumerate() {
            let p = match i {
                0 => &mut params.interaction,
                _ => &mut params.social,
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}
