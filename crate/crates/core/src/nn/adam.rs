use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are allocated lazily on the first step
/// and are positionally matched to the parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

/// One Adam update over `params`; gradients are zeroed afterwards.
///
/// Fails without touching any parameter if a gradient is non-finite.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} parameters, got {}",
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        if m.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                expected: m.shape().to_vec(),
                got: p.value.shape().to_vec(),
            });
        }
        let g = p.grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            md[i] = b1 * md[i] + (1.0 - b1) * g[i];
            vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            w[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
        p.zero_grad();
    }
    Ok(())
}
