//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState { hyper, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter, consuming the
/// gradients stored in each tensor's `grad` field. Parameters without a
/// gradient buffer are an error, as are shape mismatches against the
/// moment buffers.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<(), TensorError> {
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let grad = p.grad.as_ref().ok_or_else(|| {
            TensorError::Invalid(format!("parameter {name} has no gradient buffer"))
        })?;
        if grad.len() != p.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter {name}: grad length {} vs data length {}",
                grad.len(),
                p.data.len()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.data.len()]);
        if m.len() != p.data.len() || v.len() != p.data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter {name}: moment buffers do not match data length {}",
                p.data.len()
            )));
        }
        for k in 0..p.data.len() {
            let g = grad[k];
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p.data[k] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f32>, grad: Vec<f32>) -> BTreeMap<String, Tensor> {
        let mut t = Tensor::new(vec![values.len()], values).with_grad();
        t.grad = Some(grad);
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), t);
        m
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 0.01;
        let mut params = one_param(vec![1.0, -2.0], vec![0.5, -3.0]);
        let mut state = AdamState::new(AdamHyper::with_lr(lr));
        adam_step(&mut params, &mut state).unwrap();
        let p = &params["w"];
        assert!((p.data[0] - (1.0 - lr)).abs() < 1e-5);
        assert!((p.data[1] - (-2.0 + lr)).abs() < 1e-5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![0.3, -0.7], vec![0.0, 0.0]);
        let mut state = AdamState::new(AdamHyper::with_lr(0.1));
        adam_step(&mut params, &mut state).unwrap();
        assert_eq!(params["w"].data, vec![0.3, -0.7]);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recursion() {
        let (lr, b1, b2, eps) = (0.003f32, 0.9f32, 0.999f32, 1e-8f32);
        let g1 = 0.7f32;
        let g2 = -0.2f32;
        let mut x = 1.5f32;

        // hand-unrolled scalar recursion
        let mut m = 0.0;
        let mut v = 0.0;
        let mut expect = x;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            expect -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = one_param(vec![x], vec![g1]);
        let mut state = AdamState::new(AdamHyper { lr, beta1: b1, beta2: b2, epsilon: eps });
        adam_step(&mut params, &mut state).unwrap();
        params.get_mut("w").unwrap().grad = Some(vec![g2]);
        adam_step(&mut params, &mut state).unwrap();
        x = params["w"].data[0];
        assert!((x - expect).abs() < 1e-6, "{x} vs {expect}");
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = one_param(vec![1.0, 2.0], vec![0.1]);
        let mut state = AdamState::new(AdamHyper::with_lr(0.01));
        assert!(adam_step(&mut params, &mut state).is_err());
    }
}
