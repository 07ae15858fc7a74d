//! Bias-corrected Adam and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment buffers, one per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients stored on `params`.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>, hyper: &AdamConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer holds {} moment buffers for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2): (T, T) = (c(hyper.beta1), c(hyper.beta2));
    let corr1: T = c(1.0 - hyper.beta1.powf(t));
    let corr2: T = c(1.0 - hyper.beta2.powf(t));
    let (lr, eps): (T, T) = (c(hyper.lr), c(hyper.eps));
    for ((p, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), &[m.len()]));
        }
        let Some(grad) = p.grad().map(<[T]>::to_vec) else {
            // no gradient: moments still decay
            m.iter_mut().for_each(|x| *x *= b1);
            v.iter_mut().for_each(|x| *x *= b2);
            continue;
        };
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<T: Scalar>(params: &ParamSet<T>) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let f: T = c(max_norm / norm);
        for t in params.tensors_mut() {
            if t.requires_grad() && t.grad().is_some() {
                let g: Vec<T> = t.grad().unwrap().iter().map(|&x| x * f).collect();
                t.zero_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}
