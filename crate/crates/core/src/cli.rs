//! The `lat` command line: gen, train, eval, diagnose, project.
//!
//! Every subcommand accepts `--config FILE` with `key=value` lines (`#`
//! comments allowed); explicit flags override file entries. Each output
//! artifact gets a `<artifact>.manifest` next to it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, EmbeddingPairSet, SyntheticConfig};
use crate::diagnostics::{gap_summary, mds_project, parse_groups, similarity_table, write_mds_csv, write_svg, Group, LabeledEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{retrieve, write_report_csv, RetrievalDirection};
use crate::trainer::{load_model, write_history_csv, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "lat", version, about = "Latent translation between embedding modalities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired embedding file
    Gen(GenArgs),
    /// Train a translator pair
    Train(TrainArgs),
    /// Retrieval metrics in both directions
    Eval(EvalArgs),
    /// Labeled cosine-similarity table across T, V, GT and FV
    Diagnose(DiagnoseArgs),
    /// 2-D MDS projection of the chosen embedding groups
    Project(ProjectArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Visual tokens per item, including the global token
    #[arg(long)]
    pub tokens_a: Option<usize>,
    /// Text tokens per item, including the global token
    #[arg(long)]
    pub tokens_b: Option<usize>,
    /// identity | orthogonal | orthogonal_plus_tanh
    #[arg(long)]
    pub mapping: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also dump every token as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; defaults to `<out>.history.csv`
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Hold out the last N items (train on the rest)
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Continue from this checkpoint; its recorded configuration is reused
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Rewrite the checkpoint after every epoch
    #[arg(long)]
    pub save_every_epoch: bool,
    /// none | linear | transformer | decoder
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Token queries for both translators
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub queries_g: Option<usize>,
    #[arg(long)]
    pub queries_f: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda_inter: Option<f64>,
    #[arg(long)]
    pub lambda_intra: Option<f64>,
    #[arg(long)]
    pub lambda_global: Option<f64>,
    #[arg(long)]
    pub lambda_token: Option<f64>,
    /// Memory bank capacity per modality (0 disables it)
    #[arg(long)]
    pub bank: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalSource {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the last N items (the training holdout); 0 means all
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: EvalSource,
    /// Report CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub source: EvalSource,
    /// Number of items in the table (from the start of the evaluated set)
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[command(flatten)]
    pub source: EvalSource,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub groups: Option<String>,
    /// Coordinates CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Optional scatter plot
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::Degenerate { .. } | Error::NoConvergence { .. } => {
            EXIT_NUMERIC
        }
        Error::Shape { .. }
        | Error::Contract(_)
        | Error::Format { .. }
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::Incompatible(_)
        | Error::Io(_) => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Project(a) => cmd_project(a),
    }
}

/// `key=value` pairs from a config file; blank lines and `#` comments are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn file_entries(path: &Option<PathBuf>) -> Result<Vec<(String, String)>> {
    path.as_deref().map_or(Ok(Vec::new()), read_config_file)
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Manifest: subcommand, tool version, resolved settings, paths and duration.
struct Manifest {
    entries: Vec<(String, String)>,
    started: Instant,
}

impl Manifest {
    fn new(subcommand: &str) -> Self {
        Self {
            entries: vec![
                ("subcommand".into(), subcommand.into()),
                ("tool-version".into(), env!("CARGO_PKG_VERSION").into()),
            ],
            started: Instant::now(),
        }
    }

    fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.push(key, p.display());
    }

    fn write_next_to(mut self, artifact: &Path) -> Result<()> {
        self.push("duration-ms", self.started.elapsed().as_millis());
        let mut path = artifact.as_os_str().to_owned();
        path.push(".manifest");
        let mut w = BufWriter::new(File::create(PathBuf::from(path))?);
        for (k, v) in &self.entries {
            writeln!(w, "{k}={v}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::default();
    let mut set = |key: &str, value: &str| -> Result<()> {
        match key {
            "items" => cfg.items = parse_value(key, value)?,
            "dim" => cfg.dim = parse_value(key, value)?,
            "tokens-a" => cfg.tokens_visual = parse_value(key, value)?,
            "tokens-b" => cfg.tokens_text = parse_value(key, value)?,
            "mapping" => cfg.mapping = value.parse()?,
            "noise" => cfg.noise_std = parse_value(key, value)?,
            "seed" => cfg.seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown gen option `{other}`"))),
        }
        Ok(())
    };
    for (k, v) in file_entries(&a.config)? {
        set(&k, &v)?;
    }
    let flags = [
        ("items", a.items.map(|v| v.to_string())),
        ("dim", a.dim.map(|v| v.to_string())),
        ("tokens-a", a.tokens_a.map(|v| v.to_string())),
        ("tokens-b", a.tokens_b.map(|v| v.to_string())),
        ("mapping", a.mapping.clone()),
        ("noise", a.noise.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            set(k, &v)?;
        }
    }
    cfg.validate()?;

    let mut manifest = Manifest::new("gen");
    for (k, v) in [
        ("items", cfg.items.to_string()),
        ("dim", cfg.dim.to_string()),
        ("tokens-a", cfg.tokens_visual.to_string()),
        ("tokens-b", cfg.tokens_text.to_string()),
        ("mapping", cfg.mapping.to_string()),
        ("noise", cfg.noise_std.to_string()),
        ("seed", cfg.seed.to_string()),
    ] {
        manifest.push(&k, v);
    }
    let data = generate_synthetic(&cfg)?;
    data.save(&a.out)?;
    manifest.path("output", &a.out);
    if let Some(csv) = &a.csv {
        let mut w = create(csv)?;
        data.write_csv(&mut w)?;
        w.flush()?;
        manifest.path("output-csv", csv);
    }
    println!("wrote {} items to {}", data.len(), a.out.display());
    manifest.write_next_to(&a.out)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (k, v) in file_entries(&a.config)? {
        cfg.set(&k, &v)?;
    }
    let flags = [
        ("method", a.method.clone()),
        ("depth", a.depth.map(|v| v.to_string())),
        ("heads", a.heads.map(|v| v.to_string())),
        ("queries", a.queries.map(|v| v.to_string())),
        ("queries-g", a.queries_g.map(|v| v.to_string())),
        ("queries-f", a.queries_f.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("lambda-inter", a.lambda_inter.map(|v| v.to_string())),
        ("lambda-intra", a.lambda_intra.map(|v| v.to_string())),
        ("lambda-global", a.lambda_global.map(|v| v.to_string())),
        ("lambda-token", a.lambda_token.map(|v| v.to_string())),
        ("bank", a.bank.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch", a.batch.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("clip", a.clip.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Everything but the last `holdout` items.
fn training_part(set: EmbeddingPairSet, holdout: usize) -> Result<EmbeddingPairSet> {
    if holdout == 0 {
        return Ok(set);
    }
    Ok(set.split(set.len().checked_sub(holdout).unwrap_or(0))?.0)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = EmbeddingPairSet::load(&a.data)?;
    let train_set = training_part(data, a.holdout)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => Trainer::new(train_config(&a)?, &train_set)?,
    };

    let mut manifest = Manifest::new("train");
    for (k, v) in trainer.config.to_pairs() {
        manifest.push(&k, v);
    }
    manifest.push("holdout", a.holdout);
    manifest.path("input-data", &a.data);
    if let Some(r) = &a.resume {
        manifest.path("input-resume", r);
    }

    let out = a.out.clone();
    let save_every = a.save_every_epoch;
    trainer.run(&train_set, |t, s| {
        println!(
            "epoch {:>3}  total {:.5}  inter {:.5}  intra {:.5}",
            s.epoch, s.total, s.inter, s.intra
        );
        if save_every {
            t.checkpoint()?.save(&out)?;
        }
        Ok(())
    })?;
    trainer.checkpoint()?.save(&a.out)?;

    let history = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    let mut w = create(&history)?;
    write_history_csv(&mut w, &trainer.history)?;
    w.flush()?;
    manifest.path("output", &a.out);
    manifest.path("output-history", &history);
    println!("wrote {} and {}", a.out.display(), history.display());
    manifest.write_next_to(&a.out)
}

struct Loaded {
    model: crate::TranslatorPair<f32>,
    set: EmbeddingPairSet,
    manifest: Manifest,
}

/// Loads model and evaluation data and checks that they fit together.
fn load_source(src: &EvalSource, subcommand: &str, extra: &mut Vec<(String, String)>) -> Result<Loaded> {
    let mut holdout = src.holdout;
    let mut rest = Vec::new();
    for (k, v) in file_entries(&src.config)? {
        if k == "holdout" {
            holdout = holdout.or(Some(parse_value(&k, &v)?));
        } else {
            rest.push((k, v));
        }
    }
    *extra = rest;
    let ckpt = Checkpoint::load(&src.checkpoint)?;
    let model = load_model(&ckpt)?;
    let mut set = EmbeddingPairSet::load(&src.data)?;
    let m = &model.config;
    if (set.dim(), set.tokens_visual(), set.tokens_text()) != (m.dim, m.tokens_visual, m.tokens_text) {
        return Err(Error::Incompatible(format!(
            "checkpoint expects d={} L1={} L2={}, data has d={} L1={} L2={}",
            m.dim,
            m.tokens_visual,
            m.tokens_text,
            set.dim(),
            set.tokens_visual(),
            set.tokens_text()
        )));
    }
    let holdout = holdout.unwrap_or(0);
    if holdout > 0 && holdout < set.len() {
        set = set.split(set.len() - holdout)?.1;
    } else if holdout > set.len() {
        return Err(Error::Config(format!("holdout {holdout} exceeds {} items", set.len())));
    }
    let mut manifest = Manifest::new(subcommand);
    manifest.push("holdout", holdout);
    manifest.path("input-checkpoint", &src.checkpoint);
    manifest.path("input-data", &src.data);
    Ok(Loaded { model, set, manifest })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut extra = Vec::new();
    let Loaded { model, set, mut manifest } = load_source(&a.source, "eval", &mut extra)?;
    if let Some((k, _)) = extra.first() {
        return Err(Error::Config(format!("unknown eval option `{k}`")));
    }
    let mut reports = Vec::new();
    for dir in RetrievalDirection::BOTH {
        let r = retrieve(&model, &set, dir)?;
        println!(
            "{dir}  R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  MedR {}  (gallery {})",
            r.r1, r.r5, r.r10, r.median_rank, r.gallery
        );
        reports.push(r);
    }
    let mut w = create(&a.out)?;
    write_report_csv(&mut w, &reports)?;
    w.flush()?;
    manifest.path("output", &a.out);
    manifest.write_next_to(&a.out)
}

/// Item count and groups shared by diagnose and project.
fn selection(items: Option<usize>, groups: &Option<String>, extra: &[(String, String)], default_items: usize) -> Result<(usize, Vec<Group>)> {
    let mut n = None;
    let mut g = None;
    for (k, v) in extra {
        match k.as_str() {
            "items" => n = Some(parse_value::<usize>(k, v)?),
            "groups" => g = Some(v.clone()),
            other => return Err(Error::Config(format!("unknown option `{other}`"))),
        }
    }
    let n = items.or(n).unwrap_or(default_items);
    if n == 0 {
        return Err(Error::Config("--items must be positive".into()));
    }
    let groups = parse_groups(groups.as_deref().or(g.as_deref()).unwrap_or("T,V,GT,FV"))?;
    Ok((n, groups))
}

fn first_items(set: EmbeddingPairSet, n: usize) -> Result<EmbeddingPairSet> {
    if n >= set.len() {
        return Ok(set);
    }
    set.subset(&(0..n).collect::<Vec<_>>())
}

fn cmd_diagnose(a: DiagnoseArgs) -> Result<()> {
    let mut extra = Vec::new();
    let Loaded { model, set, mut manifest } = load_source(&a.source, "diagnose", &mut extra)?;
    let (n, groups) = selection(a.items, &a.groups, &extra, 8)?;
    let gap = gap_summary(&model, &set)?;
    println!(
        "cos(FV,T) matched {:.4} mismatched {:.4}; cos(GT,V) matched {:.4} mismatched {:.4}",
        gap.fv_t_matched, gap.fv_t_mismatched, gap.gt_v_matched, gap.gt_v_mismatched
    );
    let subset = first_items(set, n)?;
    let table = similarity_table(&LabeledEmbeddings::collect(&model, &subset, &groups)?)?;
    let mut w = create(&a.out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    manifest.push("items", subset.len());
    manifest.push("groups", groups.iter().map(Group::to_string).collect::<Vec<_>>().join(","));
    manifest.path("output", &a.out);
    manifest.write_next_to(&a.out)
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let mut extra = Vec::new();
    let Loaded { model, set, mut manifest } = load_source(&a.source, "project", &mut extra)?;
    let (n, groups) = selection(a.items, &a.groups, &extra, 64)?;
    let subset = first_items(set, n)?;
    let emb = LabeledEmbeddings::collect(&model, &subset, &groups)?;
    let proj = mds_project(&emb.values, emb.dim)?;
    println!(
        "projected {} embeddings; retained eigenvalue mass {:.4}",
        emb.len(),
        proj.retained
    );
    let mut w = create(&a.out)?;
    write_mds_csv(&mut w, &emb, &proj)?;
    w.flush()?;
    manifest.push("items", subset.len());
    manifest.push("groups", groups.iter().map(Group::to_string).collect::<Vec<_>>().join(","));
    manifest.push("retained", proj.retained);
    manifest.path("output", &a.out);
    if let Some(svg) = &a.svg {
        let mut w = create(svg)?;
        write_svg(&mut w, &emb, &proj)?;
        w.flush()?;
        manifest.path("output-svg", svg);
    }
    manifest.write_next_to(&a.out)
}
