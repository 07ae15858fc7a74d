//! Paired token embeddings: synthetic generation, the `LATE` binary format,
//! CSV export and seeded batching.
//!
//! `LATE` layout (little-endian): magic `LATE`, version `u16 = 1`, item count
//! `u32`, `L1 u16`, `L2 u16`, `d u16`, then per item a `u16` id length, the
//! UTF-8 id, `L1·d` visual floats and `L2·d` textual floats (`f32`).

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LATE";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }
}

/// Aligned token embeddings: item `i` of `visual` is paired with item `i` of `text`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPairSet {
    pub ids: Vec<String>,
    /// `[N × L1 × d]`
    pub visual: Tensor<f32>,
    /// `[N × L2 × d]`
    pub text: Tensor<f32>,
}

impl EmbeddingPairSet {
    pub fn new(ids: Vec<String>, visual: Tensor<f32>, text: Tensor<f32>) -> Result<Self> {
        let (sv, st) = (visual.shape(), text.shape());
        if sv.len() != 3 || st.len() != 3 || sv[0] != st[0] || sv[2] != st[2] || sv[0] != ids.len() {
            return Err(Error::shape("EmbeddingPairSet", sv, st));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("duplicate item id {id}")));
            }
        }
        Ok(Self { ids, visual, text })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.visual.shape()[2]
    }

    pub fn tokens_visual(&self) -> usize {
        self.visual.shape()[1]
    }

    pub fn tokens_text(&self) -> usize {
        self.text.shape()[1]
    }

    /// Items at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("empty subset".into()));
        }
        let pick = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let items = indices.iter().map(|&i| t.index_outer(i)).collect::<Result<Vec<_>>>()?;
            Tensor::stack(&items)
        };
        Self::new(
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
            pick(&self.visual)?,
            pick(&self.text)?,
        )
    }

    /// First `n` items and the remainder.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!(
                "cannot split {} items at {n}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Visual and textual token tensors for `indices`, cast to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let pick = |t: &Tensor<f32>| -> Result<Tensor<T>> {
            let inner: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * inner);
            for &i in indices {
                if i >= self.len() {
                    return Err(Error::Contract(format!("item index {i} out of range")));
                }
                data.extend(t.data()[i * inner..(i + 1) * inner].iter().map(|&x| T::from_f64_lossy(x as f64)));
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(&shape, data)
        };
        Ok((pick(&self.visual)?, pick(&self.text)?))
    }

    pub fn tokens(&self, modality: Modality) -> &Tensor<f32> {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }

    // ------------------------------------------------------------ LATE IO

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (l1, l2, d) = (self.tokens_visual(), self.tokens_text(), self.dim());
        let as_u16 = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds u16")))
        };
        let mut out = Vec::with_capacity(16 + self.visual.numel() * 4 + self.text.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.len())
                .map_err(|_| Error::Config("too many items".into()))?
                .to_le_bytes(),
        );
        out.extend_from_slice(&as_u16(l1, "L1")?.to_le_bytes());
        out.extend_from_slice(&as_u16(l2, "L2")?.to_le_bytes());
        out.extend_from_slice(&as_u16(d, "dim")?.to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&as_u16(id.len(), "id length")?.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in &self.visual.data()[i * l1 * d..(i + 1) * l1 * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &self.text.data()[i * l2 * d..(i + 1) * l2 * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if let Some(pos) = magic.iter().zip(MAGIC).position(|(a, b)| a != b) {
            return Err(Error::Format {
                offset: pos as u64,
                reason: format!("bad magic {:?}, expected \"LATE\"", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n = r.u32()? as usize;
        let (l1, l2, d) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
        if n == 0 || l1 == 0 || l2 == 0 || d == 0 {
            return Err(Error::Format {
                offset: 6,
                reason: format!("zero extent in header (items {n}, L1 {l1}, L2 {l2}, d {d})"),
            });
        }
        let mut ids = Vec::with_capacity(n);
        let mut visual = Vec::with_capacity(n * l1 * d);
        let mut text = Vec::with_capacity(n * l2 * d);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let at = r.pos;
            let raw = r.take(len)?;
            let id = std::str::from_utf8(raw).map_err(|e| Error::Format {
                offset: at as u64,
                reason: format!("item id is not UTF-8: {e}"),
            })?;
            ids.push(id.to_string());
            r.floats(l1 * d, &mut visual)?;
            r.floats(l2 * d, &mut text)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Self::new(
            ids,
            Tensor::new(&[n, l1, d], visual)?,
            Tensor::new(&[n, l2, d], text)?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One CSV row per token: `id,modality,token,v0..v{d-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|j| format!("v{j}")).collect();
        writeln!(w, "id,modality,token,{}", header.join(","))?;
        for (i, id) in self.ids.iter().enumerate() {
            for modality in [Modality::Visual, Modality::Text] {
                let t = self.tokens(modality);
                let l = t.shape()[1];
                for k in 0..l {
                    let row = t.row(i * l + k);
                    let vals: Vec<String> = row.iter().map(|&v| crate::report::fmt_g6(v as f64)).collect();
                    writeln!(w, "{id},{},{k},{}", modality.label(), vals.join(","))?;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- synthetic

/// Ground-truth map from visual tokens to textual tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mapping {
    Identity,
    Orthogonal,
    /// `tanh(Q·x)` for a fixed orthogonal `Q`.
    #[default]
    OrthogonalTanh,
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mapping::Identity => "identity",
            Mapping::Orthogonal => "orthogonal",
            Mapping::OrthogonalTanh => "orthogonal_plus_tanh",
        })
    }
}

impl FromStr for Mapping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Mapping::Identity),
            "orthogonal" => Ok(Mapping::Orthogonal),
            "orthogonal_plus_tanh" | "orthogonal-plus-tanh" => Ok(Mapping::OrthogonalTanh),
            other => Err(Error::Config(format!(
                "unknown mapping `{other}` (expected identity|orthogonal|orthogonal_plus_tanh)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub items: usize,
    pub dim: usize,
    /// `L1`: one global token plus `L1 − 1` detail tokens.
    pub tokens_visual: usize,
    /// `L2`
    pub tokens_text: usize,
    pub seed: u64,
    pub mapping: Mapping,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            items: 512,
            dim: 64,
            tokens_visual: 9,
            tokens_text: 31,
            seed: 0,
            mapping: Mapping::OrthogonalTanh,
            noise_std: 0.05,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.items == 0 {
            return Err(Error::Config("synthetic set needs at least one item".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("synthetic dimension must be positive".into()));
        }
        if self.tokens_visual == 0 || self.tokens_text == 0 {
            return Err(Error::Config("token counts must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        for (name, v) in [("L1", self.tokens_visual), ("L2", self.tokens_text), ("dim", self.dim)] {
            if v > u16::MAX as usize {
                return Err(Error::Config(format!("{name} {v} exceeds u16")));
            }
        }
        Ok(())
    }
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian matrix (rows orthonormal).
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    loop {
        let mut q: Vec<f64> = (0..dim * dim).map(|_| StandardNormal.sample(rng)).collect();
        let mut ok = true;
        for i in 0..dim {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = (0..dim).map(|k| q[i * dim + k] * q[j * dim + k]).sum();
                    for k in 0..dim {
                        q[i * dim + k] -= dot * q[j * dim + k];
                    }
                }
            }
            let n = (0..dim).map(|k| q[i * dim + k].powi(2)).sum::<f64>().sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..dim {
                q[i * dim + k] /= n;
            }
        }
        if !ok {
            continue;
        }
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let dot: f64 = (0..dim).map(|k| q[i * dim + k] * q[j * dim + k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if worst > 1e-9 {
            return Err(Error::NonFinite(format!("orthogonalization residual {worst:e}")));
        }
        return Ok(q);
    }
}

fn apply_mapping(mapping: Mapping, q: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    match mapping {
        Mapping::Identity => x.to_vec(),
        Mapping::Orthogonal | Mapping::OrthogonalTanh => {
            let mut y: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|k| q[i * d + k] * x[k]).sum())
                .collect();
            if mapping == Mapping::OrthogonalTanh {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            y
        }
    }
}

fn mean_rows(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

/// Generates a paired set with a known visual → textual map.
///
/// Visual detail tokens are standard Gaussian. Textual detail token `j`
/// (1-based) is the mapped visual detail token `((j − 1) mod (L1 − 1)) + 1`
/// plus Gaussian noise. Token 0 of every item is the mean of its detail tokens.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<EmbeddingPairSet> {
    config.validate()?;
    let (n, d, l1, l2) = (config.items, config.dim, config.tokens_visual, config.tokens_text);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let q = match config.mapping {
        Mapping::Identity => Vec::new(),
        _ => random_orthogonal(d, &mut rng)?,
    };
    let gauss = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect()
    };

    let mut visual = Vec::with_capacity(n * l1 * d);
    let mut text = Vec::with_capacity(n * l2 * d);
    for _ in 0..n {
        let v_detail: Vec<Vec<f64>> = if l1 > 1 {
            (1..l1).map(|_| gauss(&mut rng, 1.0)).collect()
        } else {
            vec![gauss(&mut rng, 1.0)]
        };
        let v_cls = if l1 > 1 { mean_rows(&v_detail, d) } else { v_detail[0].clone() };

        let noisy = |rng: &mut ChaCha8Rng, src: &[f64]| -> Vec<f64> {
            let mut y = apply_mapping(config.mapping, &q, src);
            if config.noise_std > 0.0 {
                for (a, e) in y.iter_mut().zip(gauss(rng, config.noise_std)) {
                    *a += e;
                }
            }
            y
        };
        let (t_cls, t_detail) = if l2 > 1 {
            let det: Vec<Vec<f64>> = (0..l2 - 1)
                .map(|j| noisy(&mut rng, &v_detail[j % v_detail.len()]))
                .collect();
            (mean_rows(&det, d), det)
        } else {
            (noisy(&mut rng, &v_cls), Vec::new())
        };

        visual.extend(v_cls.iter().map(|&x| x as f32));
        if l1 > 1 {
            for r in &v_detail {
                visual.extend(r.iter().map(|&x| x as f32));
            }
        }
        text.extend(t_cls.iter().map(|&x| x as f32));
        for r in &t_detail {
            text.extend(r.iter().map(|&x| x as f32));
        }
    }
    let ids = (0..n).map(|i| format!("item{i:05}")).collect();
    EmbeddingPairSet::new(ids, Tensor::new(&[n, l1, d], visual)?, Tensor::new(&[n, l2, d], text)?)
}

// ------------------------------------------------------------------ batching

/// Seeded index batches for one epoch; the final short batch is dropped.
pub fn batches(items: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if batch_size > items {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds item count {items}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
