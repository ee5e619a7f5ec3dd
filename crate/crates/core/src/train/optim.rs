use super::{TrainConfig, TrainError};
use crate::tensor::Tensor;
use indexmap::IndexMap;

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moment {
    pub fn zeros_like(t: &Tensor) -> Self {
        Self {
            m: Tensor::zeros(t.shape().to_vec()),
            v: Tensor::zeros(t.shape().to_vec()),
        }
    }
}

/// Moments keyed by parameter path, trainable parameters only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub entries: IndexMap<String, Moment>,
}

/// One AdamW update of a single tensor, `t` being the 1-based step count:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
/// ```
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    moment: &mut Moment,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if param.shape() != grad.shape() || param.shape() != moment.m.shape() || param.shape() != moment.v.shape() {
        return Err(TrainError::Shape(format!(
            "param {:?}, grad {:?}, moments {:?}/{:?}",
            param.shape(),
            grad.shape(),
            moment.m.shape(),
            moment.v.shape()
        )));
    }
    if t == 0 {
        return Err(TrainError::Config("AdamW step count starts at 1".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    let m = moment.m.data_mut();
    let v = moment.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *p);
    }
    Ok(())
}
