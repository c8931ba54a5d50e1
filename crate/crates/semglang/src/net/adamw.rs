//! AdamW with decoupled weight decay and bias correction.

use super::{NetError, ParamTensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates plus the per-tensor step counter used for
/// bias correction. Stored as f32 so checkpoints restore it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One AdamW update:
///   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// The update is computed in f64 and the results rounded back to the f32
/// stores, so a run resumed from a checkpoint retraces the same bits.
pub fn adamw_step(
    param: &mut ParamTensor,
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), NetError> {
    assert_eq!(param.data.len(), grad.len(), "gradient length mismatch");
    assert_eq!(param.data.len(), state.m.len(), "optimizer state mismatch");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(NetError::NonFiniteGradient(param.name.clone()));
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..param.data.len() {
        let g = grad[i];
        let m = hyper.beta1 * state.m[i] as f64 + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] as f64 + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let m_hat = state.m[i] as f64 / bc1;
        let v_hat = state.v[i] as f64 / bc2;
        let p = param.data[i] as f64;
        let step = hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * p);
        param.data[i] = (p - step) as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f32]) -> ParamTensor {
        ParamTensor {
            name: "p".into(),
            data: values.to_vec(),
            shape: vec![values.len()],
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Hand evaluation: m_hat = g, v_hat = g^2, so the step is
        // lr * g / (|g| + eps) = lr for g = 1.
        let mut p = param(&[0.0]);
        let mut st = AdamState::zeros(1);
        let hyper = AdamHyper {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adamw_step(&mut p, &[1.0], &mut st, &hyper).unwrap();
        assert!((p.data[0] as f64 + 0.1).abs() < 1e-6, "{}", p.data[0]);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = param(&[0.7, -0.3]);
        let mut st = AdamState::zeros(2);
        let hyper = AdamHyper {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &hyper).unwrap();
        assert_eq!(p.data, vec![0.7, -0.3]);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_decay() {
        let mut p = param(&[2.0]);
        let mut st = AdamState::zeros(1);
        let hyper = AdamHyper {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamHyper::default()
        };
        adamw_step(&mut p, &[0.0], &mut st, &hyper).unwrap();
        // p * (1 - lr * wd) = 2.0 * 0.95
        assert!((p.data[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = param(&[0.0]);
        let mut st = AdamState::zeros(1);
        assert!(matches!(
            adamw_step(&mut p, &[f64::NAN], &mut st, &AdamHyper::default()),
            Err(NetError::NonFiniteGradient(_))
        ));
    }
}
