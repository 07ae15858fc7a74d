//! Multi-head attention and the query-guided decoder layer.
//!
//! Inputs are batched `[B × tokens × d]`. No positional encoding is applied to
//! source tokens, so every output is invariant to the order of source rows.
//! Token queries are added to the attention inputs of every layer; the hidden
//! state of a stack starts at zero.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{Bound, ParamSet};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {dim} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            heads,
            dim,
            query: Linear::new(params, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::new(params, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::new(params, &format!("{name}.v"), dim, dim, rng)?,
            output: Linear::new(params, &format!("{name}.o"), dim, dim, rng)?,
        })
    }

    /// Scaled dot-product attention; returns the output and the per-head
    /// attention weights `[B·h × a × b]`.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let dh = self.dim / self.heads;
        let qp = self.query.forward(tape, bound, q)?;
        let kp = self.key.forward(tape, bound, k)?;
        let vp = self.value.forward(tape, bound, v)?;
        let qh = tape.split_heads(qp, self.heads)?;
        let kh = tape.split_heads(kp, self.heads)?;
        let vh = tape.split_heads(vp, self.heads)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.bmm(qh, kt)?;
        let scores = tape.scale(scores, c(1.0 / (dh as f64).sqrt()))?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.bmm(weights, vh)?;
        let merged = tape.merge_heads(ctx, self.heads)?;
        let out = self.output.forward(tape, bound, merged)?;
        Ok((out, weights))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, bound, q, k, v)?.0)
    }

    pub fn param_count(&self) -> usize {
        4 * (self.dim * self.dim + self.dim)
    }
}

/// Post-norm decoder layer: self-attention over the queries, cross-attention
/// onto the source tokens, then a feed-forward block.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), dim, heads, rng)?,
            cross_attn: MultiHeadAttention::new(params, &format!("{name}.cross_attn"), dim, heads, rng)?,
            ffn: FeedForward::new(params, &format!("{name}.ffn"), dim, rng)?,
            norm_self: LayerNorm::new(params, &format!("{name}.norm_self"), dim)?,
            norm_cross: LayerNorm::new(params, &format!("{name}.norm_cross"), dim)?,
            norm_ffn: LayerNorm::new(params, &format!("{name}.norm_ffn"), dim)?,
        })
    }

    /// `hidden [B×M×d]`, `queries [M×d]`, `source [B×L×d]` → `[B×M×d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        hidden: Var,
        queries: Var,
        source: Var,
    ) -> Result<Var> {
        let q = tape.add_broadcast(hidden, queries)?;
        let sa = self.self_attn.forward(tape, bound, q, q, hidden)?;
        let h = tape.add(hidden, sa)?;
        let h = self.norm_self.forward(tape, bound, h)?;

        let q = tape.add_broadcast(h, queries)?;
        let ca = self.cross_attn.forward(tape, bound, q, source, source)?;
        let h2 = tape.add(h, ca)?;
        let h2 = self.norm_cross.forward(tape, bound, h2)?;

        let ff = self.ffn.forward(tape, bound, h2)?;
        let h3 = tape.add(h2, ff)?;
        self.norm_ffn.forward(tape, bound, h3)
    }

    pub fn param_count(&self) -> usize {
        self.self_attn.param_count()
            + self.cross_attn.param_count()
            + self.ffn.param_count()
            + self.norm_self.param_count()
            + self.norm_cross.param_count()
            + self.norm_ffn.param_count()
    }

    /// `16·d² + 19·d`
    pub fn param_count_formula(dim: usize) -> usize {
        16 * dim * dim + 19 * dim
    }
}

/// `depth` decoder layers applied in sequence from a zero hidden state.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub dim: usize,
}

impl DecoderStack {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        check_heads(dim, heads)?;
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(params, &format!("{name}.layer{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, dim })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `queries [M×d]`, `source [B×L×d]` → `[B×M×d]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, queries: Var, source: Var) -> Result<Var> {
        let (sq, ss) = (tape.shape(queries).to_vec(), tape.shape(source).to_vec());
        if sq.len() != 2 || ss.len() != 3 || sq[1] != self.dim || ss[2] != self.dim {
            return Err(Error::shape("decoder", &sq, &ss));
        }
        let mut hidden = tape.zeros(&[ss[0], sq[0], self.dim])?;
        for layer in &self.layers {
            hidden = layer.forward(tape, bound, hidden, queries, source)?;
        }
        Ok(hidden)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DecoderLayer::param_count).sum()
    }
}

/// Post-norm self-attention encoder layer (the query-free baseline).
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(params, &format!("{name}.self_attn"), dim, heads, rng)?,
            ffn: FeedForward::new(params, &format!("{name}.ffn"), dim, rng)?,
            norm_attn: LayerNorm::new(params, &format!("{name}.norm_attn"), dim)?,
            norm_ffn: LayerNorm::new(params, &format!("{name}.norm_ffn"), dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let sa = self.self_attn.forward(tape, bound, x, x, x)?;
        let h = tape.add(x, sa)?;
        let h = self.norm_attn.forward(tape, bound, h)?;
        let ff = self.ffn.forward(tape, bound, h)?;
        let h2 = tape.add(h, ff)?;
        self.norm_ffn.forward(tape, bound, h2)
    }
}
