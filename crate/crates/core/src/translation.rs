//! Translators between the visual space V and the textual space T.
//!
//! `G` maps textual tokens into the visual space and `F` maps visual tokens
//! into the textual space. Row 0 of every translated output is the global
//! token; the remaining rows carry detail.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{check_heads, DecoderLayer, DecoderStack, EncoderLayer};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{init, Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the token-query initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

/// Layers in the `Linear` baseline.
pub const LINEAR_BASELINE_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// `G`: textual → visual.
    TextToVisual,
    /// `F`: visual → textual.
    VisualToText,
}

impl Direction {
    pub fn opposite(self) -> Self {
        match self {
            Direction::TextToVisual => Direction::VisualToText,
            Direction::VisualToText => Direction::TextToVisual,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Direction::TextToVisual => "G",
            Direction::VisualToText => "F",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum TranslationMethod {
    /// Source tokens pass through unchanged (joint-space baseline).
    None,
    /// Per-token stack of three affine layers.
    Linear,
    /// Self-attention encoder over the source tokens, no queries.
    Transformer,
    /// Query-guided decoder.
    #[default]
    Decoder,
}

impl fmt::Display for TranslationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TranslationMethod::None => "none",
            TranslationMethod::Linear => "linear",
            TranslationMethod::Transformer => "transformer",
            TranslationMethod::Decoder => "decoder",
        })
    }
}

impl FromStr for TranslationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(TranslationMethod::None),
            "linear" => Ok(TranslationMethod::Linear),
            "transformer" => Ok(TranslationMethod::Transformer),
            "decoder" => Ok(TranslationMethod::Decoder),
            other => Err(Error::Config(format!(
                "unknown translation method `{other}` (expected none|linear|transformer|decoder)"
            ))),
        }
    }
}

/// Shapes and hyper-parameters that determine the translator pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub method: TranslationMethod,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Tokens per visual item (`L1`).
    pub tokens_visual: usize,
    /// Tokens per textual item (`L2`).
    pub tokens_text: usize,
    /// Token queries of `G`; defaults to `tokens_visual`.
    pub queries_g: usize,
    /// Token queries of `F`; defaults to `tokens_text`.
    pub queries_f: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(method: TranslationMethod, dim: usize, tokens_visual: usize, tokens_text: usize) -> Self {
        Self {
            method,
            dim,
            heads: 4,
            depth: 3,
            tokens_visual,
            tokens_text,
            queries_g: tokens_visual,
            queries_f: tokens_text,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        if self.tokens_visual == 0 || self.tokens_text == 0 {
            return Err(Error::Config("token counts must be positive".into()));
        }
        if matches!(self.method, TranslationMethod::Decoder | TranslationMethod::Transformer) {
            check_heads(self.dim, self.heads)?;
            if self.depth == 0 {
                return Err(Error::Config("depth must be at least 1".into()));
            }
        }
        if self.method == TranslationMethod::Decoder && (self.queries_g == 0 || self.queries_f == 0) {
            return Err(Error::Config("query counts must be positive".into()));
        }
        Ok(())
    }

    /// Number of output rows produced by the translator for `direction`.
    pub fn output_tokens(&self, direction: Direction) -> usize {
        match (self.method, direction) {
            (TranslationMethod::Decoder, Direction::TextToVisual) => self.queries_g,
            (TranslationMethod::Decoder, Direction::VisualToText) => self.queries_f,
            (_, Direction::TextToVisual) => self.tokens_text,
            (_, Direction::VisualToText) => self.tokens_visual,
        }
    }

    pub fn source_tokens(&self, direction: Direction) -> usize {
        match direction {
            Direction::TextToVisual => self.tokens_text,
            Direction::VisualToText => self.tokens_visual,
        }
    }
}

/// Closed-form scalar parameter count of one query-guided translator.
pub fn decoder_param_count(depth: usize, dim: usize, queries: usize) -> usize {
    depth * DecoderLayer::param_count_formula(dim) + queries * dim
}

#[derive(Clone, Debug)]
pub enum TranslatorBody {
    Identity,
    /// Two residual GELU layers then a final affine map.
    Mlp([Linear; LINEAR_BASELINE_LAYERS]),
    Encoder(Vec<EncoderLayer>),
    Decoder {
        queries: ParamId,
        query_count: usize,
        stack: DecoderStack,
    },
}

#[derive(Clone, Debug)]
pub struct Translator {
    pub direction: Direction,
    pub dim: usize,
    pub body: TranslatorBody,
}

impl Translator {
    pub fn build<T: Scalar>(
        config: &ModelConfig,
        direction: Direction,
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = direction.prefix();
        let d = config.dim;
        let body = match config.method {
            TranslationMethod::None => TranslatorBody::Identity,
            TranslationMethod::Linear => TranslatorBody::Mlp([
                Linear::new(params, &format!("{name}.mlp0"), d, d, rng)?,
                Linear::new(params, &format!("{name}.mlp1"), d, d, rng)?,
                Linear::new(params, &format!("{name}.mlp2"), d, d, rng)?,
            ]),
            TranslationMethod::Transformer => TranslatorBody::Encoder(
                (0..config.depth)
                    .map(|i| EncoderLayer::new(params, &format!("{name}.enc{i}"), d, config.heads, rng))
                    .collect::<Result<_>>()?,
            ),
            TranslationMethod::Decoder => {
                let count = config.output_tokens(direction);
                let q = init::normal(rng, &[count, d], QUERY_INIT_STD)?;
                if min_pairwise_distance(&q) <= 0.0 {
                    return Err(Error::Config("token queries are not pairwise distinct".into()));
                }
                let queries = params.add(format!("{name}.queries"), q)?;
                let stack = DecoderStack::new(params, &format!("{name}.decoder"), d, config.heads, config.depth, rng)?;
                TranslatorBody::Decoder {
                    queries,
                    query_count: count,
                    stack,
                }
            }
        };
        Ok(Self {
            direction,
            dim: d,
            body,
        })
    }

    /// `Linear` baseline whose map is exactly the identity.
    pub fn identity_mlp<T: Scalar>(direction: Direction, dim: usize, params: &mut ParamSet<T>) -> Result<Self> {
        let name = direction.prefix();
        Ok(Self {
            direction,
            dim,
            body: TranslatorBody::Mlp([
                Linear::zeroed(params, &format!("{name}.mlp0"), dim, dim)?,
                Linear::zeroed(params, &format!("{name}.mlp1"), dim, dim)?,
                Linear::identity(params, &format!("{name}.mlp2"), dim)?,
            ]),
        })
    }

    pub fn method(&self) -> TranslationMethod {
        match self.body {
            TranslatorBody::Identity => TranslationMethod::None,
            TranslatorBody::Mlp(_) => TranslationMethod::Linear,
            TranslatorBody::Encoder(_) => TranslationMethod::Transformer,
            TranslatorBody::Decoder { .. } => TranslationMethod::Decoder,
        }
    }

    pub fn token_queries(&self) -> Option<ParamId> {
        match self.body {
            TranslatorBody::Decoder { queries, .. } => Some(queries),
            _ => None,
        }
    }

    /// `source [B×L×d]` → translated tokens `[B×M×d]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, source: Var) -> Result<Var> {
        let s = tape.shape(source);
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("translate", s, &[self.dim]));
        }
        match &self.body {
            TranslatorBody::Identity => Ok(source),
            TranslatorBody::Mlp([l0, l1, l2]) => {
                let mut h = source;
                for layer in [l0, l1] {
                    let z = layer.forward(tape, bound, h)?;
                    let z = tape.gelu(z)?;
                    h = tape.add(h, z)?;
                }
                l2.forward(tape, bound, h)
            }
            TranslatorBody::Encoder(layers) => {
                let mut h = source;
                for layer in layers {
                    h = layer.forward(tape, bound, h)?;
                }
                Ok(h)
            }
            TranslatorBody::Decoder { queries, stack, .. } => stack.forward(tape, bound, bound.var(*queries), source),
        }
    }
}

fn min_pairwise_distance<T: Scalar>(q: &Tensor<T>) -> f64 {
    let m = q.shape()[0];
    let mut best = f64::INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            let d: f64 = q
                .row(i)
                .iter()
                .zip(q.row(j))
                .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// The translator pair `G` and `F` with their parameters.
#[derive(Clone, Debug)]
pub struct TranslatorPair<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub g: Translator,
    pub f: Translator,
}

impl<T: Scalar> TranslatorPair<T> {
    /// Builds and seeds both translators from `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let g = Translator::build(&config, Direction::TextToVisual, &mut params, &mut rng)?;
        let f = Translator::build(&config, Direction::VisualToText, &mut params, &mut rng)?;
        Ok(Self { config, params, g, f })
    }

    pub fn translator(&self, direction: Direction) -> &Translator {
        match direction {
            Direction::TextToVisual => &self.g,
            Direction::VisualToText => &self.f,
        }
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TranslatorPair<U> {
        TranslatorPair {
            config: self.config.clone(),
            params: self.params.cast(),
            g: self.g.clone(),
            f: self.f.clone(),
        }
    }

    /// Translates a batch `[N×L×d]` without recording gradients.
    pub fn translate_batch(&self, direction: Direction, source: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(source.clone());
        let y = self.translator(direction).forward(&mut tape, &bound, x)?;
        Ok(tape.tensor(y))
    }

    /// Translates one item `[L×d]` → `[M×d]`.
    pub fn translate(&self, direction: Direction, source_tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let s = source_tokens.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("translate", &s, &[self.config.dim]));
        }
        let batch = source_tokens.clone().reshape(&[1, s[0], s[1]])?;
        let out = self.translate_batch(direction, &batch)?;
        let os = out.shape().to_vec();
        out.reshape(&os[1..])
    }

    /// Translates `[N×L×d]` in chunks of at most `chunk` items.
    pub fn translate_chunked(&self, direction: Direction, source: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = source.shape()[0];
        let mut parts = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let items: Vec<Tensor<T>> = (start..end).map(|i| source.index_outer(i)).collect::<Result<_>>()?;
            let out = self.translate_batch(direction, &Tensor::stack(&items)?)?;
            for i in 0..end - start {
                parts.push(out.index_outer(i)?);
            }
            start = end;
        }
        Tensor::stack(&parts)
    }
}

/// Applies `forward` then `backward` to `source`; the pair must point in
/// opposite directions.
pub fn cycle<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    forward: &Translator,
    backward: &Translator,
    source: Var,
) -> Result<Var> {
    if forward.direction == backward.direction {
        return Err(Error::Config(format!(
            "cycle needs opposite directions, got {:?} twice",
            forward.direction
        )));
    }
    let mid = forward.forward(tape, bound, source)?;
    backward.forward(tape, bound, mid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(method: TranslationMethod) -> ModelConfig {
        let mut c = ModelConfig::new(method, 8, 3, 5);
        c.heads = 2;
        c.depth = 2;
        c.seed = 7;
        c
    }

    fn random_tokens(n: usize, l: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init::normal(&mut rng, &[n, l, d], 1.0).unwrap()
    }

    #[test]
    fn method_parses_and_rejects() {
        assert_eq!("Decoder".parse::<TranslationMethod>().unwrap(), TranslationMethod::Decoder);
        assert!(matches!("mlp".parse::<TranslationMethod>(), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_is_query_count() {
        let pair = TranslatorPair::<f64>::new(cfg(TranslationMethod::Decoder)).unwrap();
        for l in [1, 8, 30] {
            let src = random_tokens(1, l, 8, 1).reshape(&[l, 8]).unwrap();
            assert_eq!(pair.translate(Direction::TextToVisual, &src).unwrap().shape(), &[3, 8]);
            assert_eq!(pair.translate(Direction::VisualToText, &src).unwrap().shape(), &[5, 8]);
        }
    }

    #[test]
    fn translate_is_deterministic() {
        let pair = TranslatorPair::<f32>::new(cfg(TranslationMethod::Decoder)).unwrap();
        let src = random_tokens(2, 5, 8, 3).cast::<f32>();
        let a = pair.translate_batch(Direction::TextToVisual, &src).unwrap();
        let b = pair.translate_batch(Direction::TextToVisual, &src).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn identity_pair_cycles_exactly() {
        let pair = TranslatorPair::<f64>::new(cfg(TranslationMethod::None)).unwrap();
        let src = random_tokens(2, 5, 8, 4);
        let mut tape = Tape::new();
        let bound = pair.params.bind(&mut tape);
        let x = tape.constant(src.clone());
        let y = cycle(&mut tape, &bound, &pair.g, &pair.f, x).unwrap();
        assert_eq!(tape.value(y), src.data());
    }

    #[test]
    fn cycle_rejects_same_direction() {
        let pair = TranslatorPair::<f64>::new(cfg(TranslationMethod::None)).unwrap();
        let mut tape = Tape::new();
        let bound = pair.params.bind(&mut tape);
        let x = tape.constant(random_tokens(1, 5, 8, 4));
        assert!(matches!(
            cycle(&mut tape, &bound, &pair.g, &pair.g, x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cycle_over_text_keeps_text_layout() {
        let pair = TranslatorPair::<f64>::new(cfg(TranslationMethod::Decoder)).unwrap();
        let mut tape = Tape::new();
        let bound = pair.params.bind(&mut tape);
        let x = tape.constant(random_tokens(2, 5, 8, 4));
        let y = cycle(&mut tape, &bound, &pair.g, &pair.f, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 8]);
    }

    #[test]
    fn identity_mlp_is_identity() {
        let mut params = ParamSet::<f64>::new();
        let t = Translator::identity_mlp(Direction::TextToVisual, 8, &mut params).unwrap();
        let src = random_tokens(2, 4, 8, 9);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(src.clone());
        let y = t.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), src.data());
    }

    #[test]
    fn none_passes_cls_through() {
        let pair = TranslatorPair::<f64>::new(cfg(TranslationMethod::None)).unwrap();
        let src = random_tokens(1, 5, 8, 2).reshape(&[5, 8]).unwrap();
        let out = pair.translate(Direction::TextToVisual, &src).unwrap();
        assert_eq!(out.row(0), src.row(0));
    }

    #[test]
    fn parameter_count_matches_formula() {
        for (depth, dim, heads, qg, qf) in [(1, 8, 2, 3, 5), (3, 16, 4, 9, 31), (2, 12, 3, 2, 7)] {
            let mut c = ModelConfig::new(TranslationMethod::Decoder, dim, qg, qf);
            c.depth = depth;
            c.heads = heads;
            let pair = TranslatorPair::<f32>::new(c).unwrap();
            let count_g: usize = pair
                .params
                .iter()
                .filter(|(n, _)| n.starts_with("G."))
                .map(|(_, t)| t.numel())
                .sum();
            assert_eq!(count_g, decoder_param_count(depth, dim, qg));
            if let TranslatorBody::Decoder { stack, .. } = &pair.g.body {
                assert_eq!(stack.param_count() + qg * dim, count_g);
            }
            assert_eq!(
                pair.params.scalar_count(),
                decoder_param_count(depth, dim, qg) + decoder_param_count(depth, dim, qf)
            );
        }
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(TranslationMethod::Decoder);
        c.heads = 3;
        assert!(matches!(TranslatorPair::<f32>::new(c.clone()), Err(Error::Config(_))));
        c.heads = 2;
        c.depth = 0;
        assert!(matches!(TranslatorPair::<f32>::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn queries_are_distinct() {
        let pair = TranslatorPair::<f32>::new(cfg(TranslationMethod::Decoder)).unwrap();
        let q = pair.params.get(pair.f.token_queries().unwrap());
        assert!(min_pairwise_distance(q) > 0.0);
    }
}
