//! Experiment orchestration behind the CLI: config files, training runs,
//! datastore construction, evaluation with tuning, domain adaptation and
//! report comparison.
//!
//! Config files are flat `key = value` lines with dotted namespaces and `#`
//! comments. Every command is deterministic under a fixed config and seed;
//! reports carry no timestamps.

use crate::batching::{
    batch_consecutive, batch_random, bm25_term_lists, pack_bm25, Batch, Bm25Index, Segment,
    BM25_B, BM25_K1,
};
use crate::corpus::{ingest, tokenize_with, Corpus, TokenizerMode, Vocab};
use crate::datastore::{build_datastore, load_datastore, save_datastore, Datastore};
use crate::inference::{
    evaluate, retrieval_accuracy, tune, EvalConfig, EvalContext, EvalMode, EvalReport, Grids,
};
use crate::memory::{build_train_memory, Instantiation, MemorySpec};
use crate::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig};
use crate::objective::{ScheduleKind, StepReport, TrainConfig, Trainer};
use crate::synth;
use anyhow::{bail, Context, Result};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ---- configuration ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    Random,
    Consecutive,
    Bm25,
}

impl StrategyKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(StrategyKind::Random),
            "consecutive" => Ok(StrategyKind::Consecutive),
            "bm25" => Ok(StrategyKind::Bm25),
            other => bail!("unknown batching strategy '{}'", other),
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Consecutive => "consecutive",
            StrategyKind::Bm25 => "bm25",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_train: PathBuf,
    pub data_dev: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub mode: TokenizerMode,
    pub model_dim: usize,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_ffn: usize,
    pub model_seg_len: usize,
    pub train_instantiation: Option<Instantiation>,
    pub train_p: f64,
    pub train_warmup_fraction: f64,
    pub train_total_steps: usize,
    pub train_lr: f64,
    pub train_schedule: ScheduleKind,
    pub train_log_every: usize,
    pub train_checkpoint_every: usize,
    pub batch_strategy: Option<StrategyKind>,
    pub batch_size: usize,
    pub batch_m: usize,
    pub batch_k: usize,
    pub eval_seg_len: usize,
    pub eval_stride: usize,
    pub eval_k: usize,
    pub eval_tau_grid: Vec<f64>,
    pub eval_tau_prime_grid: Vec<f64>,
    pub eval_lambda_grid: Vec<f64>,
    pub eval_long_mem_grid: Vec<usize>,
    pub eval_retrieval: bool,
    pub eval_tune_max_tokens: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let l = 64;
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            data_train: PathBuf::new(),
            data_dev: None,
            data_test: None,
            mode: TokenizerMode::Word,
            model_dim: 64,
            model_layers: 2,
            model_heads: 2,
            model_ffn: 256,
            model_seg_len: l,
            train_instantiation: Some(Instantiation::Trime),
            train_p: 0.9,
            train_warmup_fraction: 0.05,
            train_total_steps: 1000,
            train_lr: 1e-3,
            train_schedule: ScheduleKind::InverseSqrt,
            train_log_every: 50,
            train_checkpoint_every: 0,
            batch_strategy: None,
            batch_size: 8,
            batch_m: 4,
            batch_k: 20,
            eval_seg_len: l,
            eval_stride: l / 2,
            eval_k: 1024,
            eval_tau_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            eval_tau_prime_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            eval_lambda_grid: (0..=10).map(|i| i as f64 * 0.05).collect(),
            eval_long_mem_grid: vec![0, l, 2 * l, 4 * l, 8 * l, 16 * l, 32 * l],
            eval_retrieval: false,
            eval_tune_max_tokens: 0,
        }
    }
}

fn list_f64(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|x| x.trim().parse::<f64>().context("float list")).collect()
}

fn list_usize(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|x| x.trim().parse::<usize>().context("integer list")).collect()
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation keeps config files tidy
    format!("{}", v)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = value.parse()?,
                "out.dir" => cfg.out_dir = PathBuf::from(value),
                "data.train" => cfg.data_train = PathBuf::from(value),
                "data.dev" => cfg.data_dev = Some(PathBuf::from(value)),
                "data.test" => cfg.data_test = Some(PathBuf::from(value)),
                "data.mode" => cfg.mode = TokenizerMode::parse(value)?,
                "model.dim" => cfg.model_dim = value.parse()?,
                "model.layers" => cfg.model_layers = value.parse()?,
                "model.heads" => cfg.model_heads = value.parse()?,
                "model.ffn_dim" => cfg.model_ffn = value.parse()?,
                "model.seg_len" => cfg.model_seg_len = value.parse()?,
                "train.instantiation" => {
                    cfg.train_instantiation =
                        if value == "vanilla" { None } else { Some(Instantiation::parse(value)?) }
                }
                "train.p" => cfg.train_p = value.parse()?,
                "train.warmup_fraction" => cfg.train_warmup_fraction = value.parse()?,
                "train.total_steps" => cfg.train_total_steps = value.parse()?,
                "train.lr" => cfg.train_lr = value.parse()?,
                "train.schedule" => cfg.train_schedule = ScheduleKind::parse(value)?,
                "train.log_every" => cfg.train_log_every = value.parse()?,
                "train.checkpoint_every" => cfg.train_checkpoint_every = value.parse()?,
                "batch.strategy" => cfg.batch_strategy = Some(StrategyKind::parse(value)?),
                "batch.size" => cfg.batch_size = value.parse()?,
                "batch.m" => cfg.batch_m = value.parse()?,
                "batch.k" => cfg.batch_k = value.parse()?,
                "eval.seg_len" => cfg.eval_seg_len = value.parse()?,
                "eval.stride" => cfg.eval_stride = value.parse()?,
                "eval.k" => cfg.eval_k = value.parse()?,
                "eval.tau_grid" => cfg.eval_tau_grid = list_f64(value)?,
                "eval.tau_prime_grid" => cfg.eval_tau_prime_grid = list_f64(value)?,
                "eval.lambda_grid" => cfg.eval_lambda_grid = list_f64(value)?,
                "eval.long_mem_grid" => cfg.eval_long_mem_grid = list_usize(value)?,
                "eval.retrieval" => cfg.eval_retrieval = value.parse()?,
                "eval.tune_max_tokens" => cfg.eval_tune_max_tokens = value.parse()?,
                other => bail!("line {}: unknown config key '{}'", lineno + 1, other),
            }
        }
        if cfg.data_train.as_os_str().is_empty() {
            bail!("config missing data.train");
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("read config {:?}", path))?;
        ExperimentConfig::parse(&text)
    }

    /// Canonical serialization: sorted keys, one per line. Parsing it back
    /// yields an identical config.
    pub fn serialize(&self) -> String {
        let mut lines = vec![
            format!("batch.k = {}", self.batch_k),
            format!("batch.m = {}", self.batch_m),
            format!("batch.size = {}", self.batch_size),
            format!("data.mode = {}", self.mode.as_str()),
            format!("data.train = {}", self.data_train.display()),
            format!("eval.k = {}", self.eval_k),
            format!(
                "eval.lambda_grid = {}",
                self.eval_lambda_grid.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
            ),
            format!(
                "eval.long_mem_grid = {}",
                self.eval_long_mem_grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("eval.retrieval = {}", self.eval_retrieval),
            format!("eval.seg_len = {}", self.eval_seg_len),
            format!("eval.stride = {}", self.eval_stride),
            format!(
                "eval.tau_grid = {}",
                self.eval_tau_grid.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
            ),
            format!(
                "eval.tau_prime_grid = {}",
                self.eval_tau_prime_grid.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
            ),
            format!("eval.tune_max_tokens = {}", self.eval_tune_max_tokens),
            format!("model.dim = {}", self.model_dim),
            format!("model.ffn_dim = {}", self.model_ffn),
            format!("model.heads = {}", self.model_heads),
            format!("model.layers = {}", self.model_layers),
            format!("model.seg_len = {}", self.model_seg_len),
            format!("out.dir = {}", self.out_dir.display()),
            format!("seed = {}", self.seed),
            format!(
                "train.instantiation = {}",
                self.train_instantiation.map_or("vanilla".to_string(), |i| i.to_string())
            ),
            format!("train.checkpoint_every = {}", self.train_checkpoint_every),
            format!("train.log_every = {}", self.train_log_every),
            format!("train.lr = {}", fmt_f64(self.train_lr)),
            format!("train.p = {}", fmt_f64(self.train_p)),
            format!("train.schedule = {}", self.train_schedule.as_str()),
            format!("train.total_steps = {}", self.train_total_steps),
            format!("train.warmup_fraction = {}", fmt_f64(self.train_warmup_fraction)),
        ];
        if let Some(dev) = &self.data_dev {
            lines.push(format!("data.dev = {}", dev.display()));
        }
        if let Some(test) = &self.data_test {
            lines.push(format!("data.test = {}", test.display()));
        }
        if let Some(s) = self.batch_strategy {
            lines.push(format!("batch.strategy = {}", s.as_str()));
        }
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.model_dim,
            layers: self.model_layers,
            heads: self.model_heads,
            seg_len: self.model_seg_len,
            ffn_dim: self.model_ffn,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            instantiation: self.train_instantiation,
            p: self.train_p,
            warmup_fraction: self.train_warmup_fraction,
            total_steps: self.train_total_steps,
            lr: self.train_lr,
            schedule: self.train_schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: self.seed,
        }
    }

    pub fn eval_config(&self, mode: EvalMode) -> EvalConfig {
        EvalConfig {
            mode,
            tau: 1.0,
            tau_prime: 1.0,
            lambda: 0.0,
            k: self.eval_k,
            long_memory_tokens: 0,
            seg_len: self.eval_seg_len,
            stride: self.eval_stride,
        }
    }

    pub fn grids(&self) -> Grids {
        Grids {
            tau: self.eval_tau_grid.clone(),
            tau_prime: self.eval_tau_prime_grid.clone(),
            lambda: self.eval_lambda_grid.clone(),
            long_memory_tokens: self.eval_long_mem_grid.clone(),
        }
    }

    /// Evaluation mode implied by the training objective.
    pub fn default_eval_mode(&self) -> EvalMode {
        match self.train_instantiation {
            None => EvalMode::Vanilla,
            Some(Instantiation::Trime) => EvalMode::Trime,
            Some(Instantiation::TrimeLong) => EvalMode::TrimeLong,
            Some(Instantiation::TrimeExt) => EvalMode::TrimeExt,
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out_dir.join("vocab.tsv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.trmm")
    }

    pub fn state_path(&self) -> PathBuf {
        self.out_dir.join("train_state.bin")
    }

    pub fn log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.jsonl")
    }
}

/// splitmix64, used to derive independent per-step and per-epoch seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const TAG_BATCH: u64 = 1;
const TAG_MEMORY: u64 = 2;

// ---- commands ---------------------------------------------------------------

pub fn cmd_ingest(corpus: &Path, mode: TokenizerMode, out_vocab: &Path) -> Result<(usize, usize)> {
    let (vocab, corpus) = ingest(corpus, mode)?;
    if let Some(parent) = out_vocab.parent() {
        fs::create_dir_all(parent)?;
    }
    vocab.save(out_vocab)?;
    Ok((vocab.size(), corpus.total_tokens()))
}

fn resolve_strategy(cfg: &ExperimentConfig) -> StrategyKind {
    let inferred = match cfg.train_instantiation {
        None | Some(Instantiation::Trime) => StrategyKind::Random,
        Some(Instantiation::TrimeLong) => StrategyKind::Consecutive,
        Some(Instantiation::TrimeExt) => StrategyKind::Bm25,
    };
    match cfg.batch_strategy {
        None => inferred,
        Some(s) if s == inferred => s,
        Some(s) => {
            eprintln!(
                "warning: batching strategy {} overrides the {} default for {}",
                s.as_str(),
                inferred.as_str(),
                cfg.train_instantiation.map_or("vanilla".to_string(), |i| i.to_string())
            );
            s
        }
    }
}

fn make_batches(
    cfg: &ExperimentConfig,
    strategy: StrategyKind,
    segments: &[Segment],
    index: Option<&Bm25Index>,
    epoch: usize,
) -> Vec<Batch> {
    let seed = mix_seed(cfg.seed, TAG_BATCH.wrapping_add((epoch as u64) << 8));
    match strategy {
        StrategyKind::Random => batch_random(segments, cfg.batch_size, seed),
        StrategyKind::Consecutive => batch_consecutive(segments, cfg.batch_size, cfg.batch_m, seed),
        StrategyKind::Bm25 => {
            // one segment per document run: the packer chains individual
            // segments, so m = 1 holds by construction
            pack_bm25(segments, index.expect("bm25 index"), cfg.batch_size, cfg.batch_k, seed)
        }
    }
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub state: PathBuf,
    pub log: PathBuf,
    pub vocab: PathBuf,
    pub final_loss: Option<f64>,
}

pub fn cmd_train(cfg: &ExperimentConfig, resume: bool, force: bool) -> Result<TrainOutputs> {
    fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.checkpoint_path();
    if ckpt_path.exists() && !resume && !force {
        bail!("{:?} exists; pass --force to overwrite or --resume to continue", ckpt_path);
    }

    let (vocab, train_corpus) = ingest(&cfg.data_train, cfg.mode)?;
    vocab.save(&cfg.vocab_path())?;
    let model_cfg = cfg.model_config(vocab.size());
    let train_cfg = cfg.train_config();

    let mut trainer = if resume && ckpt_path.exists() {
        let (loaded_cfg, params) = load_checkpoint(&ckpt_path)?;
        if loaded_cfg != model_cfg {
            bail!("checkpoint config does not match experiment config");
        }
        let mut t = Trainer::new(model_cfg.clone(), params, train_cfg)?;
        t.load_state(&cfg.state_path()).context("resume needs the train state file")?;
        t
    } else {
        Trainer::new(model_cfg.clone(), init_params(&model_cfg)?, train_cfg)?
    };

    let mut log_lines: Vec<String> = if resume && cfg.log_path().exists() {
        fs::read_to_string(cfg.log_path())?.lines().map(|s| s.to_string()).collect()
    } else {
        Vec::new()
    };

    if cfg.train_total_steps == 0 {
        save_checkpoint(&ckpt_path, &model_cfg, &trainer.params)?;
        trainer.save_state(&cfg.state_path())?;
        fs::write(cfg.log_path(), "")?;
        return Ok(TrainOutputs {
            checkpoint: ckpt_path,
            state: cfg.state_path(),
            log: cfg.log_path(),
            vocab: cfg.vocab_path(),
            final_loss: None,
        });
    }

    let segments = crate::batching::segment_corpus(&train_corpus, cfg.model_seg_len);
    if segments.is_empty() {
        bail!("training corpus produced no segments");
    }
    let strategy = resolve_strategy(cfg);
    let index = if strategy == StrategyKind::Bm25 {
        let lists = bm25_term_lists(&segments, &vocab, cfg.mode);
        Some(Bm25Index::build(&lists, BM25_K1, BM25_B))
    } else {
        None
    };

    let batches_per_epoch = segments.len().div_ceil(cfg.batch_size);
    let mut epoch = usize::MAX;
    let mut batches: Vec<Batch> = Vec::new();
    let mut last_report: Option<StepReport> = None;

    while trainer.step < cfg.train_total_steps {
        let step = trainer.step;
        let want_epoch = step / batches_per_epoch;
        if want_epoch != epoch {
            epoch = want_epoch;
            batches = make_batches(cfg, strategy, &segments, index.as_ref(), epoch);
            if epoch == 0 && strategy == StrategyKind::Bm25 {
                crate::batching::save_batch_order(&cfg.out_dir.join("batch_order.txt"), &batches)?;
            }
        }
        let batch = &batches[step % batches_per_epoch];
        let spec = build_spec(cfg, batch, step)?;
        let report = trainer.train_step(batch, &spec)?;
        let log_due = cfg.train_log_every > 0
            && (step % cfg.train_log_every == 0 || step + 1 == cfg.train_total_steps);
        if log_due {
            log_lines.push(serde_json::to_string(&report)?);
        }
        if cfg.train_checkpoint_every > 0 && (step + 1) % cfg.train_checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &model_cfg, &trainer.params)?;
            trainer.save_state(&cfg.state_path())?;
        }
        last_report = Some(report);
    }

    save_checkpoint(&ckpt_path, &model_cfg, &trainer.params)?;
    trainer.save_state(&cfg.state_path())?;
    let mut log = log_lines.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    fs::write(cfg.log_path(), log)?;
    Ok(TrainOutputs {
        checkpoint: ckpt_path,
        state: cfg.state_path(),
        log: cfg.log_path(),
        vocab: cfg.vocab_path(),
        final_loss: last_report.map(|r| r.loss),
    })
}

fn build_spec(cfg: &ExperimentConfig, batch: &Batch, step: usize) -> Result<MemorySpec> {
    match cfg.train_instantiation {
        None => Ok(MemorySpec::vanilla(batch)),
        Some(inst) => {
            let seed = mix_seed(cfg.seed, TAG_MEMORY.wrapping_add((step as u64) << 8));
            build_train_memory(batch, inst, cfg.train_p, seed)
        }
    }
}

pub fn cmd_build_datastore(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    corpus_path: &Path,
    out: &Path,
    force: bool,
) -> Result<(usize, usize)> {
    if out.exists() && !force {
        bail!("{:?} exists; pass --force to overwrite", out);
    }
    let vocab = Vocab::load(&cfg.vocab_path())
        .with_context(|| format!("vocab at {:?}; run train or ingest first", cfg.vocab_path()))?;
    let (model_cfg, params) = load_checkpoint(checkpoint)?;
    let corpus = tokenize_with(&vocab, corpus_path, cfg.mode)?;
    let ds = build_datastore(&params, &model_cfg, &corpus, cfg.eval_seg_len)?;
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_datastore(out, &ds)?;
    Ok((ds.len(), ds.d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => bail!("unknown split '{}'", other),
        }
    }
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    /// tuning corpus; falls back to the evaluation corpus when absent
    pub dev: Option<&'a Path>,
    pub eval_corpus: &'a Path,
    pub mode: EvalMode,
    pub datastore: Option<&'a Path>,
    pub report_out: &'a Path,
    pub nll_dump: Option<&'a Path>,
    pub threads: usize,
}

/// Tune on dev, evaluate, write the report (and optional per-token NLL
/// stream, little-endian f64).
pub fn cmd_eval(cfg: &ExperimentConfig, req: &EvalRequest) -> Result<EvalReport> {
    let vocab = Vocab::load(&cfg.vocab_path())
        .with_context(|| format!("vocab at {:?}; run train or ingest first", cfg.vocab_path()))?;
    let (model_cfg, params) = load_checkpoint(req.checkpoint)?;
    if model_cfg.vocab_size != vocab.size() {
        bail!("checkpoint vocabulary size {} != vocab file {}", model_cfg.vocab_size, vocab.size());
    }
    let ds: Option<Datastore> = match req.datastore {
        Some(path) => Some(load_datastore(path)?),
        None => None,
    };
    if req.mode.uses_ext() && ds.is_none() {
        bail!("eval mode {} requires --datastore", req.mode.as_str());
    }
    let ctx = EvalContext {
        params: &params,
        model_cfg: &model_cfg,
        datastore: ds.as_ref(),
        threads: req.threads,
    };

    let base = cfg.eval_config(req.mode);
    let tuned = match req.dev {
        Some(dev_path) => {
            let dev = tokenize_with(&vocab, dev_path, cfg.mode)?;
            let dev = cap_corpus(dev, cfg.eval_tune_max_tokens);
            tune(&ctx, &dev, &base, &cfg.grids())?
        }
        None => {
            let dev = tokenize_with(&vocab, req.eval_corpus, cfg.mode)?;
            let dev = cap_corpus(dev, cfg.eval_tune_max_tokens);
            tune(&ctx, &dev, &base, &cfg.grids())?
        }
    };

    let eval_corpus = tokenize_with(&vocab, req.eval_corpus, cfg.mode)?;
    let (mut report, per_token) = evaluate(&ctx, &eval_corpus, &tuned, vocab.freqs())?;
    if cfg.eval_retrieval {
        if let Some(ds) = ds.as_ref() {
            report.retrieval = Some(retrieval_accuracy(
                &ctx,
                &eval_corpus,
                ds,
                &[1, 8, 64, 1024],
                tuned.seg_len,
            ));
        }
    }

    if let Some(parent) = req.report_out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(req.report_out, json)?;
    if let Some(dump) = req.nll_dump {
        let mut w = std::io::BufWriter::new(fs::File::create(dump)?);
        for nll in &per_token {
            w.write_all(&nll.to_le_bytes())?;
        }
        w.flush()?;
    }
    Ok(report)
}

fn cap_corpus(mut corpus: Corpus, max_tokens: usize) -> Corpus {
    if max_tokens == 0 {
        return corpus;
    }
    let mut used = 0;
    let mut docs = Vec::new();
    for doc in corpus.docs.drain(..) {
        if used >= max_tokens {
            break;
        }
        used += doc.tokens.len();
        docs.push(doc);
    }
    Corpus { docs }
}

/// Evaluate an existing checkpoint on a different domain without any
/// parameter update; the checkpoint file is never rewritten.
pub fn cmd_adapt(cfg: &ExperimentConfig, req: &EvalRequest) -> Result<EvalReport> {
    cmd_eval(cfg, req)
}

/// Side-by-side table of one or more evaluation reports; with exactly two,
/// a delta column (second minus first) is added.
pub fn cmd_analyze(report_paths: &[PathBuf], csv_out: Option<&Path>) -> Result<String> {
    if report_paths.is_empty() {
        bail!("analyze needs at least one report");
    }
    let mut names = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in report_paths {
        let text = fs::read_to_string(path).with_context(|| format!("read report {:?}", path))?;
        reports.push(serde_json::from_str(&text)?);
        names.push(
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        );
    }

    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let fmt = |v: f64| format!("{:.4}", v);
    rows.push(("mode".into(), reports.iter().map(|r| r.mode.clone()).collect()));
    rows.push(("tokens".into(), reports.iter().map(|r| r.token_count.to_string()).collect()));
    rows.push(("ppl".into(), reports.iter().map(|r| fmt(r.ppl)).collect()));
    rows.push(("bpc".into(), reports.iter().map(|r| fmt(r.bpc)).collect()));
    rows.push((
        "nll/token".into(),
        reports.iter().map(|r| fmt(r.total_nll / r.token_count as f64)).collect(),
    ));
    rows.push(("tau".into(), reports.iter().map(|r| fmt(r.tau)).collect()));
    rows.push(("tau'".into(), reports.iter().map(|r| fmt(r.tau_prime)).collect()));
    rows.push(("lambda".into(), reports.iter().map(|r| fmt(r.lambda)).collect()));
    rows.push((
        "long_mem".into(),
        reports.iter().map(|r| r.long_memory_tokens.to_string()).collect(),
    ));
    for (bi, label) in crate::inference::BUCKET_LABELS.iter().enumerate() {
        rows.push((
            format!("ppl {}", label),
            reports
                .iter()
                .map(|r| {
                    r.buckets
                        .get(bi)
                        .and_then(|b| b.ppl)
                        .map_or("-".to_string(), fmt)
                })
                .collect(),
        ));
    }
    let k_set: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.retrieval.iter().flatten().map(|s| s.k))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for k in k_set {
        rows.push((
            format!("acc@{}", k),
            reports
                .iter()
                .map(|r| {
                    r.retrieval
                        .as_ref()
                        .and_then(|v| v.iter().find(|s| s.k == k))
                        .map_or("-".to_string(), |s| format!("{:.4}", s.accuracy))
                })
                .collect(),
        ));
    }

    let with_delta = reports.len() == 2;
    let mut header = vec!["metric".to_string()];
    header.extend(names.clone());
    if with_delta {
        header.push("delta".into());
    }
    let mut table_rows: Vec<Vec<String>> = vec![header];
    for (name, mut cells) in rows {
        if with_delta {
            let delta = match (cells[0].parse::<f64>(), cells[1].parse::<f64>()) {
                (Ok(a), Ok(b)) => format!("{:.4}", b - a),
                _ => "-".into(),
            };
            cells.push(delta);
        }
        let mut row = vec![name];
        row.extend(cells);
        table_rows.push(row);
    }

    let widths: Vec<usize> = (0..table_rows[0].len())
        .map(|c| table_rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table_rows {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{:<width$}", cell, width = w)).collect();
        writeln!(out, "{}", line.join("  ")).unwrap();
    }

    if let Some(csv) = csv_out {
        let mut csv_text = String::new();
        for row in &table_rows {
            writeln!(csv_text, "{}", row.join(",")).unwrap();
        }
        fs::write(csv, csv_text)?;
    }
    Ok(out)
}

/// Write a synthetic dataset under `out_dir`. Kinds: `copy`, `dupfam`,
/// `domainshift`.
pub fn cmd_gen(kind: &str, out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let put = |name: &str, text: String| -> Result<PathBuf> {
        let path = out_dir.join(name);
        fs::write(&path, text)?;
        Ok(path)
    };
    match kind {
        "copy" => {
            written.push(put("train.txt", synth::gen_copy(400, 16, 50, seed))?);
            written.push(put("dev.txt", synth::gen_copy(40, 16, 50, mix_seed(seed, 101)))?);
            written.push(put("test.txt", synth::gen_copy(40, 16, 50, mix_seed(seed, 102)))?);
        }
        "dupfam" => {
            let train = synth::gen_dup_families(12, 10, 48, 12, seed);
            // dev and test are exact copies of one member per family, so
            // every dev context has a training duplicate
            let docs: Vec<&str> = train.split("\n\n").filter(|d| !d.trim().is_empty()).collect();
            let dev: String =
                docs.iter().step_by(10).map(|d| format!("{}\n\n", d)).collect();
            let test: String =
                docs.iter().skip(1).step_by(10).map(|d| format!("{}\n\n", d)).collect();
            written.push(put("train.txt", train.clone())?);
            written.push(put("dev.txt", dev)?);
            written.push(put("test.txt", test)?);
        }
        "domainshift" => {
            let (a, b) = synth::gen_domain_shift(60, 120, 40, seed);
            let (a_dev, b_dev) = synth::gen_domain_shift(6, 120, 40, mix_seed(seed, 103));
            written.push(put("a_train.txt", a)?);
            written.push(put("a_dev.txt", a_dev)?);
            written.push(put("b_train.txt", b)?);
            written.push(put("b_dev.txt", b_dev)?);
        }
        other => bail!("unknown generator '{}'", other),
    }
    Ok(written)
}
