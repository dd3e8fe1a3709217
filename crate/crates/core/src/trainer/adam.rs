use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

impl Moments {
    pub fn zeros_like(p: &Array2<f64>) -> Self {
        Self {
            m: Array2::zeros(p.raw_dim()),
            v: Array2::zeros(p.raw_dim()),
        }
    }
}

/// One bias-corrected Adam update of `param`; `step` is the 1-based step
/// number after incrementing.
pub fn adam_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    moments: &mut Moments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.dim() != grad.dim() || param.dim() != moments.m.dim() || param.dim() != moments.v.dim() {
        return Err(Error::ShapeError(format!(
            "parameter {:?}, gradient {:?}, moments {:?}",
            param.dim(),
            grad.dim(),
            moments.m.dim()
        )));
    }
    let t = i32::try_from(step).unwrap_or(i32::MAX);
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    Zip::from(param)
        .and(grad)
        .and(&mut moments.m)
        .and(&mut moments.v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    Ok(())
}
