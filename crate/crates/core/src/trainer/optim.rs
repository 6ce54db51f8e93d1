//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One update. `grads[k]` belongs to the k-th parameter of `store`; `None`
/// means the parameter did not take part in the loss and only decays.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    opt: &AdamW,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension {
            op: "optimizer_step",
            lhs: vec![store.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let theta = store.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        match &grads[k] {
            Some(g) => {
                for (((p, m), v), &g) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    *p *= decay;
                    *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                    *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
                }
            }
            None => {
                for ((p, m), v) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *p *= decay;
                    *m *= opt.beta1;
                    *v *= opt.beta2;
                    *p -= opt.lr * (*m / bc1) / ((*v / bc2).sqrt() + opt.eps);
                }
            }
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}
