//! Modality-gap diagnostics: labeled cosine tables across the four spaces and
//! a classical MDS projection for plotting.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::EmbeddingPairSet;
use crate::error::{Error, Result};
use crate::eval::{global_rows, translated_globals, unit_rows, RetrievalDirection};
use crate::report::fmt_g6;
use crate::tensor::Tensor;
use crate::translation::TranslatorPair;

pub const MDS_TOLERANCE: f64 = 1e-9;
pub const MDS_MAX_ITERATIONS: usize = 10_000;
const MDS_SEED: u64 = 0x4d44_5300;

/// Embedding space of a diagnostic row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Text global tokens.
    T,
    /// Visual global tokens.
    V,
    /// Text translated into visual space.
    GT,
    /// Visual translated into text space.
    FV,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::T, Group::V, Group::GT, Group::FV];

    fn color(self) -> &'static str {
        match self {
            Group::T => "#1f77b4",
            Group::V => "#d62728",
            Group::GT => "#ff7f0e",
            Group::FV => "#2ca02c",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::T => "T",
            Group::V => "V",
            Group::GT => "GT",
            Group::FV => "FV",
        })
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" => Ok(Group::T),
            "V" => Ok(Group::V),
            "GT" => Ok(Group::GT),
            "FV" => Ok(Group::FV),
            other => Err(Error::Config(format!("unknown group `{other}` (expected T|V|GT|FV)"))),
        }
    }
}

/// Parses a comma-separated group list such as `T,V,GT,FV`.
pub fn parse_groups(s: &str) -> Result<Vec<Group>> {
    let groups: Vec<Group> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    if groups.is_empty() {
        return Err(Error::Config("no groups given".into()));
    }
    Ok(groups)
}

/// Global-token embeddings `[N×d]` of `set` in the requested space.
pub fn group_embeddings(model: &TranslatorPair<f32>, set: &EmbeddingPairSet, group: Group) -> Result<Tensor<f32>> {
    match group {
        Group::T => global_rows(&set.text),
        Group::V => global_rows(&set.visual),
        Group::GT => translated_globals(model, set, RetrievalDirection::TextToVideo),
        Group::FV => translated_globals(model, set, RetrievalDirection::VideoToText),
    }
}

/// Rows of a diagnostic: embeddings with their item id and group.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddings {
    pub ids: Vec<String>,
    pub groups: Vec<Group>,
    /// `[n×d]`, row-major.
    pub values: Vec<f64>,
    pub dim: usize,
}

impl LabeledEmbeddings {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stacks the requested groups for every item of `set`, group by group.
    pub fn collect(model: &TranslatorPair<f32>, set: &EmbeddingPairSet, groups: &[Group]) -> Result<Self> {
        let mut out = Self {
            ids: Vec::new(),
            groups: Vec::new(),
            values: Vec::new(),
            dim: set.dim(),
        };
        for &g in groups {
            let e = group_embeddings(model, set, g)?;
            out.ids.extend(set.ids.iter().cloned());
            out.groups.extend(std::iter::repeat_n(g, set.len()));
            out.values.extend(e.data().iter().map(|&x| x as f64));
        }
        Ok(out)
    }

    pub fn label(&self, i: usize) -> String {
        format!("{}:{}", self.groups[i], self.ids[i])
    }
}

/// Full pairwise cosine matrix with row labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    pub labels: Vec<String>,
    /// `[n×n]`, row-major.
    pub matrix: Vec<f64>,
}

impl SimilarityTable {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.labels.len() + j]
    }

    /// Header `label,<labels>`, then one row per embedding.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "label,{}", self.labels.join(","))?;
        let n = self.labels.len();
        for (i, label) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.matrix[i * n..(i + 1) * n].iter().map(|&x| fmt_g6(x)).collect();
            writeln!(w, "{label},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Cosine similarity between every pair of rows.
pub fn similarity_table(emb: &LabeledEmbeddings) -> Result<SimilarityTable> {
    let n = emb.len();
    let d = emb.dim;
    if emb.values.len() != n * d || d == 0 {
        return Err(Error::shape("similarity_table", &[n, d], &[emb.values.len()]));
    }
    let mut unit = emb.values.clone();
    for (row, chunk) in unit.chunks_exact_mut(d).enumerate() {
        let norm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate { row, norm });
        }
        chunk.iter_mut().for_each(|x| *x /= norm);
    }
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = unit[i * d..(i + 1) * d].iter().zip(&unit[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            matrix[i * n + j] = s;
            matrix[j * n + i] = s;
        }
    }
    Ok(SimilarityTable {
        labels: (0..n).map(|i| emb.label(i)).collect(),
        matrix,
    })
}

/// Matched versus mismatched similarity between a translated space and its target space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapSummary {
    /// Mean `cos(FV_i, T_i)`.
    pub fv_t_matched: f64,
    /// Mean `cos(FV_i, T_j)` over `i ≠ j`.
    pub fv_t_mismatched: f64,
    /// Mean `cos(GT_i, V_i)`.
    pub gt_v_matched: f64,
    /// Mean `cos(GT_i, V_j)` over `i ≠ j`.
    pub gt_v_mismatched: f64,
}

pub fn gap_summary(model: &TranslatorPair<f32>, set: &EmbeddingPairSet) -> Result<GapSummary> {
    if set.len() < 2 {
        return Err(Error::Config("gap summary needs at least two items".into()));
    }
    let pair = |a: Group, b: Group| -> Result<(f64, f64)> {
        let x = unit_rows(&group_embeddings(model, set, a)?)?;
        let y = unit_rows(&group_embeddings(model, set, b)?)?;
        let (n, d) = (set.len(), set.dim());
        let (mut same, mut diff) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = x[i * d..(i + 1) * d].iter().zip(&y[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
                if i == j {
                    same += s;
                } else {
                    diff += s;
                }
            }
        }
        Ok((same / n as f64, diff / (n * (n - 1)) as f64))
    };
    let (fv_t_matched, fv_t_mismatched) = pair(Group::FV, Group::T)?;
    let (gt_v_matched, gt_v_mismatched) = pair(Group::GT, Group::V)?;
    Ok(GapSummary {
        fv_t_matched,
        fv_t_mismatched,
        gt_v_matched,
        gt_v_mismatched,
    })
}

/// Two-dimensional classical MDS embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct MdsProjection {
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
    /// `(λ1 + λ2) / trace(B)`; 1 when every point coincides.
    pub retained: f64,
}

/// Classical MDS of `n` points of dimension `dim` (row-major) into the plane.
pub fn mds_project(points: &[f64], dim: usize) -> Result<MdsProjection> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::shape("mds_project", &[points.len()], &[dim]));
    }
    let n = points.len() / dim;
    if n < 3 {
        return Err(Error::Config(format!("MDS needs at least 3 points, got {n}")));
    }
    if let Some(i) = points.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("MDS input coordinate {i}")));
    }
    // squared distances, then B = -1/2 J D² J
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = points[i * dim..(i + 1) * dim]
                .iter()
                .zip(&points[j * dim..(j + 1) * dim])
                .map(|(a, c)| (a - c) * (a - c))
                .sum();
            b[i * n + j] = d2;
            b[j * n + i] = d2;
        }
    }
    let row_mean: Vec<f64> = (0..n).map(|i| b[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = -0.5 * (b[i * n + j] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let trace: f64 = (0..n).map(|i| b[i * n + i]).sum();
    let scale = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok(MdsProjection {
            coords: vec![[0.0; 2]; n],
            eigenvalues: [0.0; 2],
            retained: 1.0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(MDS_SEED);
    let mut coords = vec![[0.0; 2]; n];
    let mut eigenvalues = [0.0; 2];
    for (k, lambda_out) in eigenvalues.iter_mut().enumerate() {
        let (lambda, v) = power_iteration(&b, n, scale, k, &mut rng)?;
        let lambda = lambda.max(0.0);
        *lambda_out = lambda;
        let root = lambda.sqrt();
        for i in 0..n {
            coords[i][k] = v[i] * root;
        }
        for i in 0..n {
            for j in 0..n {
                b[i * n + j] -= lambda * v[i] * v[j];
            }
        }
    }
    let retained = if trace > 0.0 {
        (eigenvalues[0] + eigenvalues[1]) / trace
    } else {
        1.0
    };
    Ok(MdsProjection {
        coords,
        eigenvalues,
        retained,
    })
}

/// Dominant eigenpair of the symmetric `b`; converged once `‖Bv − λv‖ ≤ tol·scale`.
fn power_iteration(b: &[f64], n: usize, scale: f64, index: usize, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..MDS_MAX_ITERATIONS {
        for i in 0..n {
            w[i] = b[i * n..(i + 1) * n].iter().zip(&v).map(|(a, x)| a * x).sum();
        }
        let lambda: f64 = w.iter().zip(&v).map(|(a, x)| a * x).sum();
        residual = w.iter().zip(&v).map(|(a, x)| (a - lambda * x).powi(2)).sum::<f64>().sqrt();
        if residual <= MDS_TOLERANCE * scale {
            fix_sign(&mut v);
            return Ok((lambda, v));
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            fix_sign(&mut v);
            return Ok((0.0, v));
        }
        v.iter_mut().zip(&w).for_each(|(x, y)| *x = y / norm);
    }
    Err(Error::NoConvergence { index, residual })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Largest-magnitude component positive, for reproducible orientation.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// `id,group,x,y`
pub fn write_mds_csv<W: Write>(mut w: W, emb: &LabeledEmbeddings, proj: &MdsProjection) -> Result<()> {
    writeln!(w, "id,group,x,y")?;
    for (i, c) in proj.coords.iter().enumerate() {
        writeln!(w, "{},{},{},{}", emb.ids[i], emb.groups[i], fmt_g6(c[0]), fmt_g6(c[1]))?;
    }
    Ok(())
}

/// Minimal scatter plot, one colour per group.
pub fn write_svg<W: Write>(mut w: W, emb: &LabeledEmbeddings, proj: &MdsProjection) -> Result<()> {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 24.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &proj.coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let px = |x: f64, k: usize| PAD + (x - lo[k]) / span * (SIZE - 2.0 * PAD);
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    for (i, c) in proj.coords.iter().enumerate() {
        writeln!(
            w,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"><title>{}</title></circle>"#,
            px(c[0], 0),
            SIZE - px(c[1], 1),
            emb.groups[i].color(),
            emb.label(i)
        )?;
    }
    let mut seen: Vec<Group> = Vec::new();
    for &g in &emb.groups {
        if !seen.contains(&g) {
            seen.push(g);
        }
    }
    for (k, g) in seen.iter().enumerate() {
        let y = 16.0 + 14.0 * k as f64;
        writeln!(w, r#"<circle cx="10" cy="{}" r="4" fill="{}"/>"#, y - 4.0, g.color())?;
        writeln!(w, r#"<text x="18" y="{y}" font-size="12" font-family="sans-serif">{g}</text>"#)?;
    }
    writeln!(w, "</svg>")?;
    Ok(())
}
