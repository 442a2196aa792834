//! Adam optimizer with bias correction and an optional (off by default)
//! decoupled L2 penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// True L2 weight decay; zero unless explicitly requested.
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimizerState {
    pub hyper: AdamParams,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)], hyper: AdamParams) -> Self {
        OptimizerState {
            hyper,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over all parameters. `grads[i]` may be None (no
    /// gradient reached the parameter this step); `names` supply error
    /// context for non-finite gradients.
    pub fn step(
        &mut self,
        params: &mut [Mat],
        grads: &[Option<Mat>],
        names: &[String],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let h = &self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            if !grad.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter '{}'",
                    names.get(i).map(String::as_str).unwrap_or("?")
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..param.data().len() {
                let mut g = grad.data()[j];
                if h.weight_decay != 0.0 {
                    g += h.weight_decay * param.data()[j];
                }
                let mj = h.beta1 * m.data()[j] + (1.0 - h.beta1) * g;
                let vj = h.beta2 * v.data()[j] + (1.0 - h.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                param.data_mut()[j] -= h.lr * mhat / (vhat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}
