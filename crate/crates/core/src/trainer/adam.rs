use crate::autodiff::Tensor;
use crate::encoders::Layers;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

/// One bias-corrected Adam update in place.
///
/// Coupled decay adds `weight_decay * theta` to the gradient before the
/// moments; decoupled decay shrinks `theta` by `lr * weight_decay * theta`
/// and leaves the gradient alone.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: T,
    weight_decay: T,
    decoupled: bool,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric("adam_step", format!("gradient entry {i} is not finite")));
    }
    let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(ADAM_EPS));
    state.t += 1;
    let t = state.t as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for i in 0..params.len() {
        let mut g = grads[i];
        if decoupled {
            params[i] = params[i] - lr * weight_decay * params[i];
        } else {
            g = g + weight_decay * params[i];
        }
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::numeric("adam_step", format!("parameter entry {i} became non-finite")));
    }
    Ok(())
}

/// Adam state for every array of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptimizer<T> {
    pub states: Layers<AdamState<T>>,
}

impl<T: Scalar> ModelOptimizer<T> {
    pub fn new(layers: &Layers<Tensor<T>>) -> Self {
        ModelOptimizer { states: layers.map(|_, t| AdamState::new(t.len())) }
    }

    /// Updates the arrays `lr_for` assigns a learning rate to; arrays mapped
    /// to `None` are left untouched, moments included.
    pub fn step(
        &mut self,
        layers: &mut Layers<Tensor<T>>,
        grads: &Layers<Vec<T>>,
        lr_for: impl Fn(&str) -> Option<T>,
        weight_decay: T,
        decoupled: bool,
    ) -> Result<()> {
        let grads: Vec<&Vec<T>> = grads.iter().map(|(_, g)| g).collect();
        for (((name, param), (_, state)), g) in layers.iter_mut().zip(self.states.iter_mut()).zip(grads) {
            let Some(lr) = lr_for(name) else { continue };
            let mut values = param.to_vec();
            adam_step(&mut values, g, state, lr, weight_decay, decoupled)?;
            *param = Tensor::new(param.shape(), values)?;
        }
        Ok(())
    }
}
