use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Default Adam learning rate.
pub const DEFAULT_LR: f64 = 1e-4;

/// Bias-corrected Adam state for one [`ParamSet`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }
}

/// Applies one Adam update using the gradients stored on each parameter tensor.
///
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!("state tracks {} tensors, set has {}", state.m.len(), params.len()),
        ));
    }
    for (name, t) in params.iter() {
        if let Some(g) = &t.grad {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    param: name.to_string(),
                    detail: format!("non-finite gradient at entry {i}"),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (k, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let Some(grad) = tensor.grad.take() else { continue };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.len() != grad.len() {
            return Err(Error::dim("adam_step", "moment/parameter length mismatch"));
        }
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p, 1e-3);
        p.tensors_mut()[0].grad = Some(vec![0.37]);
        adam_step(&mut p, &mut st).unwrap();
        let delta = p.tensors()[0].item() - 1.0;
        assert!(delta < 0.0);
        assert!((delta.abs() - 1e-3).abs() < 1e-9, "{delta}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = single(2.5);
        let mut st = AdamState::new(&p, 1e-2);
        for _ in 0..10 {
            p.tensors_mut()[0].grad = Some(vec![0.0]);
            adam_step(&mut p, &mut st).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 2.5);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn nan_gradient_names_param() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, 1e-2);
        p.tensors_mut()[0].grad = Some(vec![f64::NAN]);
        match adam_step(&mut p, &mut st) {
            Err(Error::Training { param, .. }) => assert_eq!(param, "x"),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    /// Independent scalar Adam recurrence on f(x) = x².
    fn scalar_adam_oracle(x0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn quadratic_converges_and_matches_recurrence() {
        let oracle = scalar_adam_oracle(1.0, 1e-2, 1000);
        assert!(oracle.abs() < 1e-3, "oracle {oracle}");

        let mut p = single(1.0);
        let mut st = AdamState::new(&p, 1e-2);
        let mut tape = Tape::new();
        for _ in 0..1000 {
            let x = tape.param(&p.tensors()[0]);
            let loss = tape.square(x);
            let grads = tape.backward(loss).unwrap();
            p.tensors_mut()[0].grad = Some(grads.get(x).unwrap().to_vec());
            adam_step(&mut p, &mut st).unwrap();
        }
        let x = p.tensors()[0].item();
        assert!(x.abs() < 1e-3);
        assert_eq!(x, oracle);
    }
}
