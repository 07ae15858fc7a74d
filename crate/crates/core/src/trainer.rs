//! Adam training loop over the composite objective.
//!
//! Every source of randomness is derived from the configured seed: parameter
//! initialization from `seed`, the batch order of epoch `e` from stream `e` of
//! the same seed. The memory bank starts empty at every epoch, so the state
//! after `k` epochs is fully captured by the parameters, the Adam moments and
//! the step counter, and a resumed run continues bit-for-bit.

use std::io::Write;

use crate::bank::{MemoryBank, DEFAULT_CAPACITY};
use crate::checkpoint::{Checkpoint, Section};
use crate::data::{batches, EmbeddingPairSet, Modality};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, LevelLoss, LossWeights};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::report::fmt_g6;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::translation::{ModelConfig, TranslationMethod, TranslatorPair};

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub method: TranslationMethod,
    pub depth: usize,
    pub heads: usize,
    /// Token queries of `G`; `None` means one per visual token.
    pub queries_g: Option<usize>,
    /// Token queries of `F`; `None` means one per text token.
    pub queries_f: Option<usize>,
    /// Memory bank entries per modality; 0 disables the bank.
    pub bank_capacity: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::default(),
            method: TranslationMethod::Decoder,
            depth: 3,
            heads: 4,
            queries_g: None,
            queries_f: None,
            bank_capacity: DEFAULT_CAPACITY,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 19] = [
        "method",
        "depth",
        "heads",
        "queries-g",
        "queries-f",
        "epochs",
        "batch",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "seed",
        "tau",
        "lambda-inter",
        "lambda-intra",
        "lambda-global",
        "lambda-token",
        "bank",
        "clip",
    ];

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip norm must be non-negative, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Translator shapes for data with the given layout.
    pub fn model_config(&self, dim: usize, tokens_visual: usize, tokens_text: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.method, dim, tokens_visual, tokens_text);
        m.depth = self.depth;
        m.heads = self.heads;
        m.queries_g = self.queries_g.unwrap_or(tokens_visual);
        m.queries_f = self.queries_f.unwrap_or(tokens_text);
        m.seed = self.seed;
        m
    }

    /// Sets one field from its textual form. Underscores and dashes in keys are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        fn queries(key: &str, value: &str) -> Result<Option<usize>> {
            match value.trim() {
                "" | "auto" => Ok(None),
                v => num(key, v).map(Some),
            }
        }
        let key = key.trim().replace('_', "-");
        match key.as_str() {
            "method" => self.method = value.trim().parse()?,
            "depth" => self.depth = num(&key, value)?,
            "heads" => self.heads = num(&key, value)?,
            "queries" => {
                self.queries_g = queries(&key, value)?;
                self.queries_f = self.queries_g;
            }
            "queries-g" => self.queries_g = queries(&key, value)?,
            "queries-f" => self.queries_f = queries(&key, value)?,
            "epochs" => self.epochs = num(&key, value)?,
            "batch" | "batch-size" => self.batch_size = num(&key, value)?,
            "lr" => self.adam.lr = num(&key, value)?,
            "beta1" => self.adam.beta1 = num(&key, value)?,
            "beta2" => self.adam.beta2 = num(&key, value)?,
            "eps" => self.adam.eps = num(&key, value)?,
            "seed" => self.seed = num(&key, value)?,
            "tau" => self.weights.tau = num(&key, value)?,
            "lambda-inter" => self.weights.lambda_inter = num(&key, value)?,
            "lambda-intra" => self.weights.lambda_intra = num(&key, value)?,
            "lambda-global" => self.weights.lambda_global = num(&key, value)?,
            "lambda-token" => self.weights.lambda_token = num(&key, value)?,
            "bank" => self.bank_capacity = num(&key, value)?,
            "clip" => self.clip_norm = num(&key, value)?,
            other => return Err(Error::Config(format!("unknown training option `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `key=value` pairs; floats use round-trip formatting.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let q = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |n| n.to_string());
        let values = [
            self.method.to_string(),
            self.depth.to_string(),
            self.heads.to_string(),
            q(self.queries_g),
            q(self.queries_f),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.seed.to_string(),
            self.weights.tau.to_string(),
            self.weights.lambda_inter.to_string(),
            self.weights.lambda_intra.to_string(),
            self.weights.lambda_global.to_string(),
            self.weights.lambda_token.to_string(),
            self.bank_capacity.to_string(),
            self.clip_norm.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }
}

/// Per-epoch means over batches.
///
/// `inter` and `intra` sum the unweighted terms over the enabled levels, each
/// multiplied by its level weight; `global` and `token` are the level losses
/// before their level weight. Disabled terms read 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub inter: f64,
    pub intra: f64,
    pub global: f64,
    pub token: f64,
}

impl EpochStats {
    fn encode(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.total, self.inter, self.intra, self.global, self.token
        )
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Incompatible(format!("malformed history entry `{s}`"));
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 6 {
            return Err(bad());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            epoch: parts[0].parse().map_err(|_| bad())?,
            total: f(1)?,
            inter: f(2)?,
            intra: f(3)?,
            global: f(4)?,
            token: f(5)?,
        })
    }
}

pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochStats]) -> Result<()> {
    writeln!(w, "epoch,mean_total,mean_inter,mean_intra,mean_global,mean_token")?;
    for h in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            h.epoch,
            fmt_g6(h.total),
            fmt_g6(h.inter),
            fmt_g6(h.intra),
            fmt_g6(h.global),
            fmt_g6(h.token)
        )?;
    }
    Ok(())
}

/// Model, optimizer state and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TranslatorPair<f32>,
    pub adam: AdamState<f32>,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    /// Fresh run with seeded initialization, shaped after `set`.
    pub fn new(config: TrainConfig, set: &EmbeddingPairSet) -> Result<Self> {
        config.validate()?;
        let model = TranslatorPair::new(config.model_config(set.dim(), set.tokens_visual(), set.tokens_text()))?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            config,
            model,
            adam,
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    /// Restores a run saved with [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = train_config_from(ckpt)?;
        config.validate()?;
        let model = load_model(ckpt)?;
        let mut adam = AdamState::new(&model.params);
        adam.step = ckpt.parse("state.step")?;
        for (i, (name, t)) in model.params.iter().enumerate() {
            adam.m[i] = section_data(ckpt, &format!("adam.m/{name}"), t.shape())?;
            adam.v[i] = section_data(ckpt, &format!("adam.v/{name}"), t.shape())?;
        }
        let epochs_done: usize = ckpt.parse("state.epochs")?;
        let history = (0..epochs_done)
            .map(|e| EpochStats::decode(&ckpt.parse::<String>(&format!("history.{e}"))?))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            model,
            adam,
            epochs_done,
            history,
        })
    }

    fn check_data(&self, set: &EmbeddingPairSet) -> Result<()> {
        let m = &self.model.config;
        if (set.dim(), set.tokens_visual(), set.tokens_text()) != (m.dim, m.tokens_visual, m.tokens_text) {
            return Err(Error::Incompatible(format!(
                "data has d={} L1={} L2={} but the model expects d={} L1={} L2={}",
                set.dim(),
                set.tokens_visual(),
                set.tokens_text(),
                m.dim,
                m.tokens_visual,
                m.tokens_text
            )));
        }
        Ok(())
    }

    /// Trains one epoch and appends its statistics to the history.
    pub fn run_epoch(&mut self, set: &EmbeddingPairSet) -> Result<EpochStats> {
        self.check_data(set)?;
        let epoch = self.epochs_done;
        let order = batches(set.len(), self.config.batch_size, self.config.seed, epoch as u64)?;
        let mut bank = MemoryBank::<f32>::new(self.config.bank_capacity, set.dim());
        let mut sums = [0.0f64; 5];
        let weights = self.config.weights.clone();
        let mut tape = Tape::new();
        for idx in &order {
            let (v, t) = set.batch::<f32>(idx)?;
            let negatives = (!bank.is_empty()).then(|| bank.negatives());
            let step = self.adam.step;
            let nonfinite = |term: String| Error::NonFiniteLoss { term, epoch, step };

            tape.clear();
            let bound = self.model.params.bind(&mut tape);
            let (_, obj) = batch_objective(&mut tape, &bound, &self.model, &v, &t, &weights, negatives.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(op) => nonfinite(format!("forward pass ({op})")),
                    other => other,
                })?;

            let value = |tape: &Tape<f32>, name: &str, var: Var| -> Result<f64> {
                let x = tape.scalar_value(var)? as f64;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(nonfinite(name.to_string()))
                }
            };
            let level = |tape: &Tape<f32>, prefix: &str, l: Option<LevelLoss>| -> Result<[f64; 3]> {
                let Some(l) = l else { return Ok([0.0; 3]) };
                let opt = |name: &str, v: Option<Var>| v.map_or(Ok(0.0), |v| value(tape, &format!("{prefix} {name}"), v));
                Ok([
                    opt("inter-modal", l.inter)?,
                    opt("cycle", l.intra)?,
                    value(tape, &format!("{prefix} combined"), l.combined)?,
                ])
            };
            let g = level(&tape, "global", obj.global)?;
            let k = level(&tape, "token", obj.token)?;
            let total = value(&tape, "total", obj.total)?;

            let grads = tape.backward(obj.total).map_err(|e| match e {
                Error::NonFinite(op) => nonfinite(format!("gradient ({op})")),
                other => other,
            })?;
            self.model.params.zero_grad();
            self.model.params.absorb(&grads, &bound)?;
            let norm = clip_grad_norm(&mut self.model.params, self.config.clip_norm);
            if !norm.is_finite() {
                return Err(nonfinite("gradient norm".into()));
            }
            adam_step(&mut self.model.params, &mut self.adam, &self.config.adam)?;

            bank.push(Modality::Visual, &cls_rows(&v)?)?;
            bank.push(Modality::Text, &cls_rows(&t)?)?;

            let (lg, lt) = (weights.lambda_global, weights.lambda_token);
            sums[0] += total;
            sums[1] += lg * g[0] + lt * k[0];
            sums[2] += lg * g[1] + lt * k[1];
            sums[3] += g[2];
            sums[4] += k[2];
        }
        let n = order.len() as f64;
        let stats = EpochStats {
            epoch,
            total: sums[0] / n,
            inter: sums[1] / n,
            intra: sums[2] / n,
            global: sums[3] / n,
            token: sums[4] / n,
        };
        self.model.params.zero_grad();
        self.epochs_done += 1;
        self.history.push(stats);
        Ok(stats)
    }

    /// Trains until `config.epochs` epochs are done, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        set: &EmbeddingPairSet,
        mut on_epoch: impl FnMut(&Trainer, &EpochStats) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            let stats = self.run_epoch(set)?;
            on_epoch(self, &stats)?;
        }
        Ok(())
    }

    /// Complete state: config, parameters, Adam moments, progress and history.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut config: Vec<(String, String)> = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("train.{k}"), v))
            .collect();
        let m = &self.model.config;
        for (k, v) in [
            ("method", m.method.to_string()),
            ("dim", m.dim.to_string()),
            ("heads", m.heads.to_string()),
            ("depth", m.depth.to_string()),
            ("tokens-visual", m.tokens_visual.to_string()),
            ("tokens-text", m.tokens_text.to_string()),
            ("queries-g", m.queries_g.to_string()),
            ("queries-f", m.queries_f.to_string()),
            ("seed", m.seed.to_string()),
        ] {
            config.push((format!("model.{k}"), v));
        }
        config.push(("state.step".into(), self.adam.step.to_string()));
        config.push(("state.epochs".into(), self.epochs_done.to_string()));
        if let Some(last) = self.history.last() {
            for (k, v) in [
                ("total", last.total),
                ("inter", last.inter),
                ("intra", last.intra),
                ("global", last.global),
                ("token", last.token),
            ] {
                config.push((format!("metric.final-{k}"), v.to_string()));
            }
        }
        for h in &self.history {
            config.push((format!("history.{}", h.epoch), h.encode()));
        }

        let mut sections = Vec::with_capacity(3 * self.model.params.len());
        for (name, t) in self.model.params.iter() {
            sections.push(Section::new(format!("param/{name}"), t.shape(), t.data().to_vec())?);
        }
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            sections.push(Section::new(format!("adam.m/{name}"), t.shape(), self.adam.m[i].clone())?);
            sections.push(Section::new(format!("adam.v/{name}"), t.shape(), self.adam.v[i].clone())?);
        }
        Ok(Checkpoint { config, sections })
    }
}

/// Trains a fresh model on `set` for `config.epochs` epochs.
pub fn train(set: &EmbeddingPairSet, config: TrainConfig) -> Result<(Checkpoint, Vec<EpochStats>)> {
    let mut trainer = Trainer::new(config, set)?;
    trainer.run(set, |_, _| Ok(()))?;
    Ok((trainer.checkpoint()?, trainer.history))
}

/// Training configuration recorded in a checkpoint.
pub fn train_config_from(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for key in TrainConfig::KEYS {
        let v: String = ckpt.parse(&format!("train.{key}"))?;
        config.set(key, &v).map_err(|e| Error::Incompatible(e.to_string()))?;
    }
    Ok(config)
}

/// Rebuilds the translator pair stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<TranslatorPair<f32>> {
    let mut m = ModelConfig::new(
        ckpt.parse("model.method")?,
        ckpt.parse("model.dim")?,
        ckpt.parse("model.tokens-visual")?,
        ckpt.parse("model.tokens-text")?,
    );
    m.heads = ckpt.parse("model.heads")?;
    m.depth = ckpt.parse("model.depth")?;
    m.queries_g = ckpt.parse("model.queries-g")?;
    m.queries_f = ckpt.parse("model.queries-f")?;
    m.seed = ckpt.parse("model.seed")?;
    let mut model = TranslatorPair::new(m)?;
    restore_params(&mut model.params, ckpt)?;
    Ok(model)
}

fn restore_params(params: &mut ParamSet<f32>, ckpt: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let shape = params.get(id).shape().to_vec();
        let data = section_data(ckpt, &format!("param/{name}"), &shape)?;
        params.set(id, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}

fn section_data(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let s = ckpt
        .section(name)
        .ok_or_else(|| Error::Incompatible(format!("checkpoint lacks section `{name}`")))?;
    if s.shape != shape {
        return Err(Error::Incompatible(format!(
            "section `{name}` has shape {:?}, model expects {shape:?}",
            s.shape
        )));
    }
    Ok(s.data.clone())
}

/// Token 0 of every item of `[B×L×d]`, as `[B×d]`.
pub fn cls_rows<T: crate::Scalar>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::shape("cls_rows", s, &[]));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * d);
    for i in 0..b {
        out.extend_from_slice(&tokens.data()[i * l * d..i * l * d + d]);
    }
    Tensor::new(&[b, d], out)
}
