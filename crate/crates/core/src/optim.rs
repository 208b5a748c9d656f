//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_hyperparams(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if learning_rate < 0.0 || !learning_rate.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(format!("{name} must be in (0,1), got {b}")));
            }
        }
        if epsilon <= 0.0 {
            return Err(Error::param(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }
}

/// One Adam update over an ordered parameter list.
///
/// Moment buffers are keyed by position, so the caller must pass the same
/// parameters in the same order every step. Every parameter must carry a
/// populated gradient; gradients are cleared after the update.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if state.first_moment.is_empty() && state.step_count == 0 {
        state.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.second_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if state.first_moment.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer was initialized for {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (idx, p) in params.iter().enumerate() {
        if state.first_moment[idx].len() != p.numel() {
            return Err(Error::contract(format!(
                "moment buffer {idx} has length {}, parameter has {}",
                state.first_moment[idx].len(),
                p.numel()
            )));
        }
        if p.grad.is_none() {
            return Err(Error::contract(format!(
                "adam_step: parameter {idx} has no gradient"
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (idx, p) in params.iter_mut().enumerate() {
        let grad = p.grad.take().expect("checked above");
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        check_finite(data, "adam_step")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor {
        let mut t = Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = param(&[1.0, -2.0]);
        p.grad = Some(vec![0.0, 0.0]);
        let mut state = AdamState::new(0.1).unwrap();
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // param 0, grad 1, lr 1e-3: update = lr * g / (|g| + eps) ~ 1e-3
        let mut p = param(&[0.0]);
        p.grad = Some(vec![1.0]);
        let mut state = AdamState::new(1e-3).unwrap();
        adam_step(&mut [&mut p], &mut state).unwrap();
        let expect = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-12);
        assert!(p.grad.is_none(), "grads are cleared after the step");
    }

    #[test]
    fn two_steps_constant_grad_strictly_decrease() {
        // closed-form two-step oracle: with constant grad g, bias-corrected
        // m_hat == g and v_hat == g^2 at every step, so each update is
        // exactly -lr * g / (|g| + eps)
        let g = 0.7;
        let lr = 0.01;
        let per_step = lr * g / (g + 1e-8);
        let mut p = param(&[1.0]);
        let mut state = AdamState::new(lr).unwrap();
        let mut prev = p.data()[0];
        for step in 1..=2 {
            p.grad = Some(vec![g]);
            adam_step(&mut [&mut p], &mut state).unwrap();
            let now = p.data()[0];
            assert!(now < prev, "step {step} did not decrease the parameter");
            assert!((prev - now - per_step).abs() < 1e-9);
            prev = now;
        }
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut a = param(&[0.0]);
        let mut b = param(&[0.0]);
        a.grad = Some(vec![1.0]);
        let mut state = AdamState::new(1e-3).unwrap();
        let err = adam_step(&mut [&mut a, &mut b], &mut state).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        // and nothing moved
        assert_eq!(a.data(), &[0.0]);
    }

    #[test]
    fn param_count_must_stay_stable() {
        let mut a = param(&[0.0]);
        a.grad = Some(vec![1.0]);
        let mut state = AdamState::new(1e-3).unwrap();
        adam_step(&mut [&mut a], &mut state).unwrap();
        let mut b = param(&[0.0]);
        a.grad = Some(vec![1.0]);
        b.grad = Some(vec![1.0]);
        assert!(adam_step(&mut [&mut a, &mut b], &mut state).is_err());
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(AdamState::new(-1.0).is_err());
        assert!(AdamState::with_hyperparams(1e-3, 1.0, 0.999, 1e-8).is_err());
        assert!(AdamState::with_hyperparams(1e-3, 0.9, 0.999, 0.0).is_err());
    }
}
