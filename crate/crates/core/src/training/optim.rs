use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

/// Adam moments for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam descent on every parameter, using `param.grad`.
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} moments for {} parameters", state.m.len(), store.len()),
        ));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.grad.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("moment shape mismatch for {}", p.name),
            ));
        }
        if !p.grad.all_finite() {
            return Err(Error::Numerical {
                context: "adam_step".into(),
                detail: format!("non-finite gradient for parameter {}", p.name),
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for (((theta, g), mi), vi) in value
            .iter_mut()
            .zip(grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
