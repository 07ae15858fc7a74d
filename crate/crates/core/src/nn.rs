//! Small building blocks: affine maps, layer-norm parameters, feed-forward blocks.

use rand::Rng;

use crate::error::Result;
use crate::params::{init, Bound, ParamId, ParamSet};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}.w"), init::xavier_uniform(rng, fan_in, fan_out)?)?;
        let bias = params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])?)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Square layer initialized to the identity map.
    pub fn identity<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        let weight = params.add(format!("{name}.w"), Tensor::identity(dim)?)?;
        let bias = params.add(format!("{name}.b"), Tensor::zeros(&[dim])?)?;
        Ok(Self {
            weight,
            bias,
            fan_in: dim,
            fan_out: dim,
        })
    }

    /// Layer with all weights and biases zero.
    pub fn zeroed<T: Scalar>(params: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = params.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])?)?;
        let bias = params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])?)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_broadcast(y, bound.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = params.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())?)?;
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[dim])?)?;
        Ok(Self { gamma, beta, dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), c(LAYER_NORM_EPS))
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Position-wise `d → 4d → d` block with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub const EXPANSION: usize = 4;

    pub fn new<T: Scalar, R: Rng>(params: &mut ParamSet<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let hidden = dim * Self::EXPANSION;
        Ok(Self {
            expand: Linear::new(params, &format!("{name}.expand"), dim, hidden, rng)?,
            contract: Linear::new(params, &format!("{name}.contract"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, bound, x)?;
        let h = tape.gelu(h)?;
        self.contract.forward(tape, bound, h)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.contract.param_count()
    }
}
