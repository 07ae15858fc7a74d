//! Training objective: bidirectional InfoNCE between translated and target
//! embeddings plus cycle-consistency MSE, at the global and detail levels.
//!
//! Inter-modal similarity always compares a translated embedding with a true
//! target-modality embedding: `sim(v_i, G(t_j))` for text-to-video and
//! `sim(F(v_i), t_j)` for video-to-text. Similarity is cosine.

use crate::error::{Error, Result};
use crate::params::Bound;
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::translation::TranslatorPair;

pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub lambda_global: f64,
    pub lambda_token: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda_inter: 1.0,
            lambda_intra: 1.0,
            lambda_global: 1.0,
            lambda_token: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_inter", self.lambda_inter),
            ("lambda_intra", self.lambda_intra),
            ("lambda_global", self.lambda_global),
            ("lambda_token", self.lambda_token),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Level weights multiplied by `factor`, which scales the total loss by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_global: self.lambda_global * factor,
            lambda_token: self.lambda_token * factor,
            ..self.clone()
        }
    }
}

/// Which axis of `sim[i][j] = sim(video_i, text_j)` the softmax runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NceDirection {
    /// Each video row is normalized over texts (columns).
    VideoToText,
    /// Each text column is normalized over videos (rows).
    TextToVideo,
}

/// InfoNCE over a square similarity matrix whose diagonal holds the positives.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, sim: Var, tau: f64, direction: NceDirection) -> Result<Var> {
    let s = tape.shape(sim);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Contract(format!("info_nce needs a square matrix, got {s:?}")));
    }
    info_nce_with_negatives(tape, sim, None, tau, direction)
}

/// InfoNCE with optional extra negatives: `[N×K]` appended as columns for
/// [`NceDirection::VideoToText`], `[K×N]` appended as rows for
/// [`NceDirection::TextToVideo`]. Positives stay on the diagonal of `sim`.
pub fn info_nce_with_negatives<T: Scalar>(
    tape: &mut Tape<T>,
    sim: Var,
    extra: Option<Var>,
    tau: f64,
    direction: NceDirection,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let s = tape.shape(sim).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Contract(format!("positive block must be square, got {s:?}")));
    }
    let logits = match (direction, extra) {
        (NceDirection::VideoToText, None) => sim,
        (NceDirection::VideoToText, Some(e)) => tape.concat(&[sim, e], 1)?,
        (NceDirection::TextToVideo, None) => tape.transpose(sim)?,
        (NceDirection::TextToVideo, Some(e)) => {
            let full = tape.concat(&[sim, e], 0)?;
            tape.transpose(full)?
        }
    };
    let logits = tape.scale(logits, c(1.0 / tau))?;
    let logp = tape.log_softmax(logits)?;
    let pos = tape.diagonal(logp)?;
    let m = tape.mean(pos)?;
    tape.scale(m, -T::one())
}

/// Cosine similarity matrix `[N×M]` between the rows of `a [N×d]` and `b [M×d]`.
pub fn cosine_matrix<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize(a)?;
    let bn = tape.l2_normalize(b)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// `½(L_v2t + L_t2v)` over the cosine matrix of paired embeddings.
pub fn inter_modal_loss<T: Scalar>(tape: &mut Tape<T>, v_emb: Var, t_emb: Var, tau: f64) -> Result<Var> {
    if tape.shape(v_emb).first() != tape.shape(t_emb).first() {
        return Err(Error::Contract(format!(
            "inter-modal loss needs equal row counts, got {:?} and {:?}",
            tape.shape(v_emb),
            tape.shape(t_emb)
        )));
    }
    let sim = cosine_matrix(tape, v_emb, t_emb)?;
    let a = info_nce(tape, sim, tau, NceDirection::VideoToText)?;
    let b = info_nce(tape, sim, tau, NceDirection::TextToVideo)?;
    let s = tape.add(a, b)?;
    tape.scale(s, c(0.5))
}

/// Mean squared difference between two equally shaped tensors.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, cycled: Var, original: Var) -> Result<Var> {
    if tape.shape(cycled) != tape.shape(original) {
        return Err(Error::shape("mse", tape.shape(cycled), tape.shape(original)));
    }
    let d = tape.sub(cycled, original)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// `½(mse(G(F(v)), v) + mse(F(G(t)), t))`
pub fn cycle_mse<T: Scalar>(
    tape: &mut Tape<T>,
    cycled_visual: Var,
    visual: Var,
    cycled_text: Var,
    text: Var,
) -> Result<Var> {
    let a = mse(tape, cycled_visual, visual)?;
    let b = mse(tape, cycled_text, text)?;
    let s = tape.add(a, b)?;
    tape.scale(s, c(0.5))
}

/// Global token (row 0) of `[B×L×d]` as `[B×d]`.
pub fn global_token<T: Scalar>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("global_token", &s, &[]));
    }
    let g = tape.slice(tokens, 1, 0, 1)?;
    tape.reshape(g, &[s[0], s[2]])
}

/// Mean of the detail tokens (rows 1..L) of `[B×L×d]` as `[B×d]`.
pub fn pooled_detail<T: Scalar>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("pooled_detail", &s, &[]));
    }
    if s[1] < 2 {
        return Err(Error::Config(format!(
            "token-level loss needs at least 2 tokens per item, got {}",
            s[1]
        )));
    }
    let d = tape.slice(tokens, 1, 1, s[1] - 1)?;
    tape.mean_axis(d, 1)
}

/// Extra contrastive negatives for the global level, one matrix per modality.
#[derive(Clone, Debug)]
pub struct BankNegatives<T> {
    /// Past visual global embeddings `[K×d]`.
    pub visual: Option<Tensor<T>>,
    /// Past textual global embeddings `[K×d]`.
    pub text: Option<Tensor<T>>,
}

/// Everything the losses read for one batch, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub visual: Var,
    pub text: Var,
    /// `G(t)`, in visual space.
    pub text_translated: Var,
    /// `F(v)`, in textual space.
    pub visual_translated: Var,
    /// `G(F(v))`; absent when the cycle term is disabled.
    pub visual_cycled: Option<Var>,
    /// `F(G(t))`
    pub text_cycled: Option<Var>,
}

impl ForwardPass {
    /// Runs both translators (and the cycles when `with_cycle`).
    pub fn run<T: Scalar>(
        tape: &mut Tape<T>,
        bound: &Bound,
        model: &TranslatorPair<T>,
        visual: Var,
        text: Var,
        with_cycle: bool,
    ) -> Result<Self> {
        let text_translated = model.g.forward(tape, bound, text)?;
        let visual_translated = model.f.forward(tape, bound, visual)?;
        let (visual_cycled, text_cycled) = if with_cycle {
            (
                Some(model.g.forward(tape, bound, visual_translated)?),
                Some(model.f.forward(tape, bound, text_translated)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            visual,
            text,
            text_translated,
            visual_translated,
            visual_cycled,
            text_cycled,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Global,
    Token,
}

/// Loss terms of one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub inter: Option<Var>,
    pub intra: Option<Var>,
    /// `λ_inter·L_inter + λ_intra·L_intra`
    pub combined: Var,
}

fn level_view<T: Scalar>(tape: &mut Tape<T>, level: Level, tokens: Var) -> Result<Var> {
    match level {
        Level::Global => global_token(tape, tokens),
        Level::Token => pooled_detail(tape, tokens),
    }
}

/// Inter/intra composition at one level. Terms with zero weight are skipped.
pub fn level_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pass: &ForwardPass,
    weights: &LossWeights,
    level: Level,
    bank: Option<&BankNegatives<T>>,
) -> Result<LevelLoss> {
    weights.validate()?;
    let v = level_view(tape, level, pass.visual)?;
    let t = level_view(tape, level, pass.text)?;

    let inter = if weights.lambda_inter > 0.0 {
        let gt = level_view(tape, level, pass.text_translated)?;
        let fv = level_view(tape, level, pass.visual_translated)?;
        let (bank_v, bank_t) = match bank {
            Some(b) => (b.visual.clone(), b.text.clone()),
            None => (None, None),
        };
        // text-to-video: sim(v_i, G(t_j)), softmax over videos
        let s_g = cosine_matrix(tape, v, gt)?;
        let extra_rows = match bank_v {
            Some(bv) => {
                let bv = tape.constant(bv);
                Some(cosine_matrix(tape, bv, gt)?)
            }
            None => None,
        };
        let l_t2v = info_nce_with_negatives(tape, s_g, extra_rows, weights.tau, NceDirection::TextToVideo)?;
        // video-to-text: sim(F(v_i), t_j), softmax over texts
        let s_f = cosine_matrix(tape, fv, t)?;
        let extra_cols = match bank_t {
            Some(bt) => {
                let bt = tape.constant(bt);
                Some(cosine_matrix(tape, fv, bt)?)
            }
            None => None,
        };
        let l_v2t = info_nce_with_negatives(tape, s_f, extra_cols, weights.tau, NceDirection::VideoToText)?;
        let s = tape.add(l_v2t, l_t2v)?;
        Some(tape.scale(s, c(0.5))?)
    } else {
        None
    };

    let intra = if weights.lambda_intra > 0.0 {
        let (Some(vc), Some(tc)) = (pass.visual_cycled, pass.text_cycled) else {
            return Err(Error::Contract("cycle term enabled but the forward pass has no cycle outputs".into()));
        };
        let vc = level_view(tape, level, vc)?;
        let tc = level_view(tape, level, tc)?;
        Some(cycle_mse(tape, vc, v, tc, t)?)
    } else {
        None
    };

    let combined = weighted_sum(tape, &[(inter, weights.lambda_inter), (intra, weights.lambda_intra)])?;
    Ok(LevelLoss { inter, intra, combined })
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(term, w) in terms {
        if let Some(v) = term {
            let s = tape.scale(v, c(w))?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant_scalar(T::zero()),
    }
}

/// `L_global = λ_inter·L_inter + λ_intra·L_intra` on the global tokens.
pub fn global_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pass: &ForwardPass,
    weights: &LossWeights,
    bank: Option<&BankNegatives<T>>,
) -> Result<LevelLoss> {
    level_loss(tape, pass, weights, Level::Global, bank)
}

/// Same composition on the mean-pooled detail tokens.
pub fn token_loss<T: Scalar>(tape: &mut Tape<T>, pass: &ForwardPass, weights: &LossWeights) -> Result<LevelLoss> {
    level_loss(tape, pass, weights, Level::Token, None)
}

/// All terms of the full objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub global: Option<LevelLoss>,
    pub token: Option<LevelLoss>,
}

/// `λ_global·L_global + λ_token·L_token`; a level with zero weight is skipped.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pass: &ForwardPass,
    weights: &LossWeights,
    bank: Option<&BankNegatives<T>>,
) -> Result<Objective> {
    weights.validate()?;
    let global = if weights.lambda_global > 0.0 {
        Some(global_loss(tape, pass, weights, bank)?)
    } else {
        None
    };
    let token = if weights.lambda_token > 0.0 {
        Some(token_loss(tape, pass, weights)?)
    } else {
        None
    };
    let total = weighted_sum(
        tape,
        &[
            (global.map(|l| l.combined), weights.lambda_global),
            (token.map(|l| l.combined), weights.lambda_token),
        ],
    )?;
    Ok(Objective { total, global, token })
}

/// Builds the forward pass and objective for one batch of paired tokens.
pub fn batch_objective<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    model: &TranslatorPair<T>,
    visual: &Tensor<T>,
    text: &Tensor<T>,
    weights: &LossWeights,
    bank: Option<&BankNegatives<T>>,
) -> Result<(ForwardPass, Objective)> {
    let v = tape.constant(visual.clone());
    let t = tape.constant(text.clone());
    let with_cycle = weights.lambda_intra > 0.0;
    let pass = ForwardPass::run(tape, bound, model, v, t, with_cycle)?;
    let obj = total_loss(tape, &pass, weights, bank)?;
    Ok((pass, obj))
}

impl<T: Scalar> Tape<T> {
    /// Scalar constant node.
    pub fn constant_scalar(&mut self, value: T) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(value)?))
    }
}
