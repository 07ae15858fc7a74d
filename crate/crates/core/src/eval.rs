//! Retrieval in the translated space and its metrics.
//!
//! Queries are translated into the gallery's modality and scored against the
//! gallery by cosine similarity of the global (first) token. The rank of the
//! true pair counts every other gallery item scoring at least as high, so
//! ties always count against the query.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::EmbeddingPairSet;
use crate::error::{Error, Result};
use crate::losses::{cycle_mse, global_token, pooled_detail};
use crate::report::fmt_g6;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::translation::{Direction, TranslatorPair};

/// Items translated per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RetrievalDirection {
    /// Text queries, visual gallery, through `G`.
    TextToVideo,
    /// Visual queries, text gallery, through `F`.
    VideoToText,
}

impl RetrievalDirection {
    pub const BOTH: [RetrievalDirection; 2] = [RetrievalDirection::TextToVideo, RetrievalDirection::VideoToText];

    pub fn translator(self) -> Direction {
        match self {
            RetrievalDirection::TextToVideo => Direction::TextToVisual,
            RetrievalDirection::VideoToText => Direction::VisualToText,
        }
    }
}

impl fmt::Display for RetrievalDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalDirection::TextToVideo => "T2V",
            RetrievalDirection::VideoToText => "V2T",
        })
    }
}

impl FromStr for RetrievalDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T2V" => Ok(RetrievalDirection::TextToVideo),
            "V2T" => Ok(RetrievalDirection::VideoToText),
            _ => Err(Error::Config(format!("unknown retrieval direction `{s}` (expected T2V|V2T)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: RetrievalDirection,
    /// 1-based rank of the true pair for each query.
    pub ranks: Vec<usize>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub gallery: usize,
}

impl RetrievalReport {
    pub fn from_ranks(direction: RetrievalDirection, ranks: Vec<usize>, gallery: usize) -> Result<Self> {
        if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > gallery) {
            return Err(Error::Contract(format!("rank {r} outside [1, {gallery}]")));
        }
        Ok(Self {
            direction,
            r1: recall_at_k(&ranks, 1)?,
            r5: recall_at_k(&ranks, 5)?,
            r10: recall_at_k(&ranks, 10)?,
            median_rank: median_rank(&ranks)?,
            ranks,
            gallery,
        })
    }

    /// Report for a `[queries × gallery]` score matrix whose true pairs lie on the diagonal.
    pub fn from_scores(direction: RetrievalDirection, scores: &[f64], queries: usize, gallery: usize) -> Result<Self> {
        if gallery == 0 {
            return Err(Error::Config("empty gallery".into()));
        }
        if scores.len() != queries * gallery || queries > gallery {
            return Err(Error::shape("retrieval scores", &[queries, gallery], &[scores.len()]));
        }
        let ranks = (0..queries)
            .map(|q| pessimistic_rank(&scores[q * gallery..(q + 1) * gallery], q))
            .collect();
        Self::from_ranks(direction, ranks, gallery)
    }
}

/// `1 + #{j ≠ truth : row[j] ≥ row[truth]}`
pub fn pessimistic_rank(row: &[f64], truth: usize) -> usize {
    let s = row[truth];
    1 + row.iter().enumerate().filter(|&(j, &x)| j != truth && x >= s).count()
}

/// Fraction of ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Median rank; an even count averages the middle two.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    let mut s = ranks.to_vec();
    s.sort_unstable();
    let n = s.len();
    Ok(if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    })
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Config("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    Ok(())
}

/// Cosine similarities `[Q×G]` (row-major) between the rows of `queries` and `gallery`.
pub fn cosine_scores(queries: &Tensor<f32>, gallery: &Tensor<f32>) -> Result<Vec<f64>> {
    let (qs, gs) = (queries.shape(), gallery.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(Error::shape("cosine_scores", qs, gs));
    }
    let q = unit_rows(queries)?;
    let g = unit_rows(gallery)?;
    let d = qs[1];
    let mut out = Vec::with_capacity(qs[0] * gs[0]);
    for a in q.chunks_exact(d) {
        for b in g.chunks_exact(d) {
            out.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
    }
    Ok(out)
}

/// Rows of `[N×d]` scaled to unit length, in f64.
pub fn unit_rows(x: &Tensor<f32>) -> Result<Vec<f64>> {
    let d = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for (row, chunk) in x.data().chunks_exact(d).enumerate() {
        let norm = chunk.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate { row, norm });
        }
        out.extend(chunk.iter().map(|&v| v as f64 / norm));
    }
    Ok(out)
}

/// Global token of every item of `[N×L×d]`.
pub fn global_rows(tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
    crate::trainer::cls_rows(tokens)
}

/// Global tokens of the queries translated into the gallery modality.
pub fn translated_globals(model: &TranslatorPair<f32>, set: &EmbeddingPairSet, direction: RetrievalDirection) -> Result<Tensor<f32>> {
    let source = match direction {
        RetrievalDirection::TextToVideo => &set.text,
        RetrievalDirection::VideoToText => &set.visual,
    };
    let out = model.translate_chunked(direction.translator(), source, EVAL_CHUNK)?;
    global_rows(&out)
}

/// Ranks each item's partner among all items of `set` in translated space.
pub fn retrieve(model: &TranslatorPair<f32>, set: &EmbeddingPairSet, direction: RetrievalDirection) -> Result<RetrievalReport> {
    if set.is_empty() {
        return Err(Error::Config("empty gallery".into()));
    }
    let queries = translated_globals(model, set, direction)?;
    let gallery = match direction {
        RetrievalDirection::TextToVideo => global_rows(&set.visual)?,
        RetrievalDirection::VideoToText => global_rows(&set.text)?,
    };
    let scores = cosine_scores(&queries, &gallery)?;
    RetrievalReport::from_scores(direction, &scores, set.len(), set.len())
}

/// `metric,value` CSV with one row per direction and metric.
pub fn write_report_csv<W: Write>(mut w: W, reports: &[RetrievalReport]) -> Result<()> {
    writeln!(w, "metric,value")?;
    for r in reports {
        for (name, v) in [
            ("R@1", r.r1),
            ("R@5", r.r5),
            ("R@10", r.r10),
            ("MedR", r.median_rank),
            ("gallery", r.gallery as f64),
        ] {
            writeln!(w, "{}_{name},{}", r.direction, fmt_g6(v))?;
        }
    }
    Ok(())
}

/// Mean cycle reconstruction error over `set`: the cycle term of the
/// objective, averaged over the global and pooled-detail levels.
pub fn cycle_error(model: &TranslatorPair<f32>, set: &EmbeddingPairSet) -> Result<f64> {
    let visual = set.visual.clone();
    let text = set.text.clone();
    let fv = model.translate_chunked(Direction::VisualToText, &visual, EVAL_CHUNK)?;
    let gfv = model.translate_chunked(Direction::TextToVisual, &fv, EVAL_CHUNK)?;
    let gt = model.translate_chunked(Direction::TextToVisual, &text, EVAL_CHUNK)?;
    let fgt = model.translate_chunked(Direction::VisualToText, &gt, EVAL_CHUNK)?;

    let mut tape = Tape::<f64>::new();
    let [v, t, vc, tc] = [&visual, &text, &gfv, &fgt].map(|x| tape.constant(x.cast()));
    let mut total = 0.0;
    let gv = global_token(&mut tape, v)?;
    let gt_ = global_token(&mut tape, t)?;
    let gvc = global_token(&mut tape, vc)?;
    let gtc = global_token(&mut tape, tc)?;
    let g = cycle_mse(&mut tape, gvc, gv, gtc, gt_)?;
    total += tape.scalar_value(g)?;
    let pv = pooled_detail(&mut tape, v)?;
    let pt = pooled_detail(&mut tape, t)?;
    let pvc = pooled_detail(&mut tape, vc)?;
    let ptc = pooled_detail(&mut tape, tc)?;
    let p = cycle_mse(&mut tape, pvc, pv, ptc, pt)?;
    total += tape.scalar_value(p)?;
    Ok(total / 2.0)
}
