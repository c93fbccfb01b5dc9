//! Memory-augmented evaluation: per-token distributions with a memory
//! temperature, a separate memory distribution with linear interpolation,
//! sliding-window perplexity, retrieval accuracy, and grid tuning.
//!
//! Evaluation memory is assembled per instantiation: local pairs from the
//! current window, long-range pairs from earlier positions of the same
//! document (recomputed with current parameters, truncated to the most
//! recent `long_memory_tokens`), and top-K datastore neighbors.
//!
//! Two composition paths exist. The trime modes fold memory into the same
//! normalization as the vocabulary logits, each similarity divided by tau;
//! with external memory an additional interpolation against a separate
//! memory distribution (tau', lambda) is applied. The continuous-cache and
//! kNN-LM baselines use the interpolation path only, so lambda = 0
//! reproduces the plain model exactly.

use crate::corpus::Corpus;
use crate::datastore::{knn_search_threaded, similarity, Datastore};
use crate::model::{encode_plain, vocab_logits, ModelConfig, ModelParams};
use crate::tensor::lse_slice;
use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Vanilla,
    Trime,
    TrimeLong,
    TrimeExt,
    CacheBaseline,
    KnnLmBaseline,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "none" => Ok(EvalMode::Vanilla),
            "trime" => Ok(EvalMode::Trime),
            "trime_long" => Ok(EvalMode::TrimeLong),
            "trime_ext" => Ok(EvalMode::TrimeExt),
            "cache" => Ok(EvalMode::CacheBaseline),
            "knnlm" => Ok(EvalMode::KnnLmBaseline),
            other => bail!("unknown eval mode '{}'", other),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Vanilla => "vanilla",
            EvalMode::Trime => "trime",
            EvalMode::TrimeLong => "trime_long",
            EvalMode::TrimeExt => "trime_ext",
            EvalMode::CacheBaseline => "cache",
            EvalMode::KnnLmBaseline => "knnlm",
        }
    }

    pub fn uses_local(&self) -> bool {
        matches!(
            self,
            EvalMode::Trime | EvalMode::TrimeLong | EvalMode::TrimeExt | EvalMode::CacheBaseline
        )
    }

    pub fn uses_long(&self) -> bool {
        matches!(self, EvalMode::TrimeLong | EvalMode::TrimeExt | EvalMode::CacheBaseline)
    }

    pub fn uses_ext(&self) -> bool {
        matches!(self, EvalMode::TrimeExt | EvalMode::KnnLmBaseline)
    }

    /// Memory folded into the vocabulary normalization (temperature tau).
    pub fn single_norm_memory(&self) -> bool {
        matches!(self, EvalMode::Trime | EvalMode::TrimeLong | EvalMode::TrimeExt)
    }

    /// Interpolation against a separate memory distribution (tau', lambda).
    pub fn interpolates(&self) -> bool {
        matches!(self, EvalMode::TrimeExt | EvalMode::CacheBaseline | EvalMode::KnnLmBaseline)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub tau: f64,
    pub tau_prime: f64,
    pub lambda: f64,
    /// top-K retrieved from the datastore
    pub k: usize,
    pub long_memory_tokens: usize,
    /// evaluation window length
    pub seg_len: usize,
    /// each window scores its trailing `stride` tokens
    pub stride: usize,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || self.tau_prime <= 0.0 {
            bail!("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            bail!("lambda {} outside [0, 1]", self.lambda);
        }
        if self.seg_len < 2 {
            bail!("evaluation segment length must be >= 2");
        }
        if self.stride == 0 || self.stride > self.seg_len {
            bail!("stride {} outside [1, {}]", self.stride, self.seg_len);
        }
        if self.k == 0 {
            bail!("k must be >= 1");
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Vanilla,
            tau: 1.0,
            tau_prime: 1.0,
            lambda: 0.0,
            k: 1024,
            long_memory_tokens: 0,
            seg_len: 64,
            stride: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSource {
    Local,
    Long,
    Ext,
}

/// One evaluation-memory candidate. `pos` is the key's document position
/// for local/long pairs and the datastore entry index for external pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandPair {
    pub pos: u64,
    pub sim: f64,
    pub target: u32,
    pub source: PairSource,
}

/// Deduplicated union of the memory components an instantiation uses. Long
/// memory keeps only its most recent `long_memory_tokens` pairs.
pub fn assemble_eval_memory(
    mode: EvalMode,
    long_memory_tokens: usize,
    local: &[CandPair],
    long: &[CandPair],
    knn: &[CandPair],
) -> Vec<CandPair> {
    let mut seen: BTreeSet<(bool, u64)> = BTreeSet::new();
    let mut out = Vec::new();
    if mode.uses_local() {
        for p in local {
            if seen.insert((false, p.pos)) {
                out.push(*p);
            }
        }
    }
    if mode.uses_long() {
        let keep = long.len().min(long_memory_tokens);
        for p in &long[long.len() - keep..] {
            if seen.insert((false, p.pos)) {
                out.push(*p);
            }
        }
    }
    if mode.uses_ext() {
        for p in knn {
            if seen.insert((true, p.pos)) {
                out.push(*p);
            }
        }
    }
    out
}

/// Full next-token distribution mixing logits and memory similarities in one
/// normalization, each similarity divided by `tau`. Log-space throughout.
pub fn eval_next_token_dist(
    vocab_logits: &[f64],
    sims: &[f64],
    mem_targets: &[u32],
    tau: f64,
) -> Vec<f64> {
    assert_eq!(sims.len(), mem_targets.len());
    assert!(tau > 0.0);
    let v = vocab_logits.len();
    let mut grouped: Vec<Vec<f64>> = vec![Vec::new(); v];
    for (s, &t) in sims.iter().zip(mem_targets) {
        grouped[t as usize].push(s / tau);
    }
    let weights: Vec<f64> = (0..v)
        .map(|w| {
            let mut terms = vec![vocab_logits[w]];
            terms.extend(&grouped[w]);
            lse_slice(&terms)
        })
        .collect();
    let z = lse_slice(&weights);
    weights.iter().map(|w| (w - z).exp()).collect()
}

/// Distribution over the tokens present in memory, zero elsewhere.
pub fn memory_dist(
    sims: &[f64],
    mem_targets: &[u32],
    tau_prime: f64,
    vocab_size: usize,
) -> Result<Vec<f64>> {
    assert_eq!(sims.len(), mem_targets.len());
    if sims.is_empty() {
        bail!("memory distribution over empty memory");
    }
    let max = sims.iter().map(|s| s / tau_prime).fold(f64::NEG_INFINITY, f64::max);
    let mut mass = vec![0.0; vocab_size];
    let mut total = 0.0;
    for (s, &t) in sims.iter().zip(mem_targets) {
        let e = (s / tau_prime - max).exp();
        mass[t as usize] += e;
        total += e;
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// `(1 - lambda) p + lambda p_mem`, elementwise.
pub fn interpolate(p: &[f64], p_mem: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(p.len(), p_mem.len());
    assert!((0.0..=1.0).contains(&lambda));
    p.iter().zip(p_mem).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect()
}

/// Everything needed to score one evaluated token under any configuration
/// of (tau, tau', lambda, long_memory_tokens) without re-encoding.
#[derive(Clone, Debug)]
pub struct TokenScore {
    pub target: u32,
    pub lse_logits: f64,
    pub logit_target: f64,
    pub local: Vec<CandPair>,
    /// ascending document position, untruncated
    pub long: Vec<CandPair>,
    pub knn: Vec<CandPair>,
}

fn lse_combine(lse_a: f64, extra: &[f64]) -> f64 {
    let m = extra.iter().fold(lse_a, |acc, &x| acc.max(x));
    let mut sum = (lse_a - m).exp();
    for &x in extra {
        sum += (x - m).exp();
    }
    m + sum.ln()
}

/// Negative log-likelihood of one token under `cfg`, using only the scalar
/// summaries in `ts`. Agrees with the full-distribution path to float
/// round-off.
pub fn token_nll(ts: &TokenScore, cfg: &EvalConfig) -> f64 {
    let mem =
        assemble_eval_memory(cfg.mode, cfg.long_memory_tokens, &ts.local, &ts.long, &ts.knn);

    let log_p = if cfg.mode.single_norm_memory() && !mem.is_empty() {
        let scaled: Vec<f64> = mem.iter().map(|p| p.sim / cfg.tau).collect();
        let mut num_terms = vec![ts.logit_target];
        for (pair, s) in mem.iter().zip(&scaled) {
            if pair.target == ts.target {
                num_terms.push(*s);
            }
        }
        lse_slice(&num_terms) - lse_combine(ts.lse_logits, &scaled)
    } else {
        ts.logit_target - ts.lse_logits
    };

    if cfg.mode.interpolates() && !mem.is_empty() {
        let max = mem.iter().map(|p| p.sim / cfg.tau_prime).fold(f64::NEG_INFINITY, f64::max);
        let mut matching = 0.0;
        let mut total = 0.0;
        for pair in &mem {
            let e = (pair.sim / cfg.tau_prime - max).exp();
            if pair.target == ts.target {
                matching += e;
            }
            total += e;
        }
        let p_mem = matching / total;
        let p_final = (1.0 - cfg.lambda) * log_p.exp() + cfg.lambda * p_mem;
        -p_final.ln()
    } else {
        -log_p
    }
}

/// Offsets of one evaluation window: `(start, end, score_from)` -- the
/// window covers tokens `[start, end)` and scores targets
/// `[score_from, end)`.
fn window_plan(n: usize, window: usize, stride: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    if n < 2 {
        return out;
    }
    if stride == window {
        // disjoint segments; the first token of each later window has no
        // within-window context and is not scored
        let mut start = 0;
        while start + 1 < n {
            let end = (start + window).min(n);
            out.push((start, end, start + 1));
            start = end;
        }
    } else {
        let mut k = 0usize;
        loop {
            let start = k * stride;
            let score_from = if k == 0 { 1 } else { start + window - stride };
            if score_from >= n {
                break;
            }
            let end = (start + window).min(n);
            out.push((start, end, score_from));
            k += 1;
        }
    }
    out
}

pub struct EvalContext<'a> {
    pub params: &'a ModelParams,
    pub model_cfg: &'a ModelConfig,
    pub datastore: Option<&'a Datastore>,
    pub threads: usize,
}

/// Per-document bank of (position, key, target) used for long-range memory
/// and retrieval queries; documents are encoded in consecutive windows of
/// `seg_len`.
fn encode_bank(
    ctx: &EvalContext,
    tokens: &[u32],
    seg_len: usize,
) -> Vec<(u64, Vec<f64>, u32)> {
    let n = tokens.len();
    let mut bank = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + seg_len).min(n);
        let (_, g) = encode_plain(ctx.params, ctx.model_cfg, &tokens[start..end]);
        for row in 0..end - start {
            let pos = start + row;
            if pos + 1 >= n {
                break;
            }
            bank.push((pos as u64, g.row(row).to_vec(), tokens[pos + 1]));
        }
        start = end;
    }
    bank
}

/// Sliding-window pass producing one [`TokenScore`] per scored token, in
/// (document, position) order. `max_long` bounds how much long-range memory
/// is materialized per token (the scoring config may truncate further).
pub fn collect_token_scores(
    ctx: &EvalContext,
    corpus: &Corpus,
    cfg: &EvalConfig,
    max_long: usize,
) -> Result<Vec<TokenScore>> {
    cfg.validate()?;
    if cfg.mode.uses_ext() && ctx.datastore.is_none() {
        bail!("eval mode {} requires a datastore", cfg.mode.as_str());
    }
    if cfg.seg_len > ctx.model_cfg.seg_len {
        bail!(
            "evaluation segment length {} exceeds positional capacity {}",
            cfg.seg_len,
            ctx.model_cfg.seg_len
        );
    }
    let d = ctx.model_cfg.dim;
    let mut out = Vec::new();
    for doc in &corpus.docs {
        let n = doc.tokens.len();
        let bank = if cfg.mode.uses_long() && max_long > 0 {
            encode_bank(ctx, &doc.tokens, cfg.seg_len)
        } else {
            Vec::new()
        };
        for (start, end, score_from) in window_plan(n, cfg.seg_len, cfg.stride) {
            let window = &doc.tokens[start..end];
            let (f, g) = encode_plain(ctx.params, ctx.model_cfg, window);
            // long candidates end strictly before this window
            let bank_upto = bank.partition_point(|e| (e.0 as usize) < start);
            for p in score_from..end {
                let row = p - start - 1;
                let logits = vocab_logits(ctx.params, f.row(row));
                let target = doc.tokens[p];
                let q = g.row(row);

                let local: Vec<CandPair> = (0..row)
                    .map(|j| CandPair {
                        pos: (start + j) as u64,
                        sim: similarity(q, g.row(j), d),
                        target: window[j + 1],
                        source: PairSource::Local,
                    })
                    .collect();

                let long: Vec<CandPair> = if cfg.mode.uses_long() && max_long > 0 {
                    let from = bank_upto.saturating_sub(max_long);
                    bank[from..bank_upto]
                        .iter()
                        .map(|(pos, key, tgt)| CandPair {
                            pos: *pos,
                            sim: similarity(q, key, d),
                            target: *tgt,
                            source: PairSource::Long,
                        })
                        .collect()
                } else {
                    Vec::new()
                };

                let knn: Vec<CandPair> = if cfg.mode.uses_ext() {
                    knn_search_threaded(ctx.datastore.unwrap(), q, cfg.k, ctx.threads)
                        .into_iter()
                        .map(|h| CandPair {
                            pos: h.index as u64,
                            sim: h.score,
                            target: h.target,
                            source: PairSource::Ext,
                        })
                        .collect()
                } else {
                    Vec::new()
                };

                out.push(TokenScore {
                    target,
                    lse_logits: lse_slice(&logits),
                    logit_target: logits[target as usize],
                    local,
                    long,
                    knn,
                });
            }
        }
    }
    if out.is_empty() {
        bail!("no scorable tokens in corpus");
    }
    Ok(out)
}

// ---- reports ---------------------------------------------------------------

/// Frequency bucket boundaries, most frequent first.
pub const BUCKET_LABELS: [&str; 5] = [">10k", "1k-10k", "100-1k", "10-100", "<=10"];

pub fn bucket_of(freq: u64) -> usize {
    if freq > 10_000 {
        0
    } else if freq > 1_000 {
        1
    } else if freq > 100 {
        2
    } else if freq > 10 {
        3
    } else {
        4
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BucketStat {
    pub label: String,
    pub count: usize,
    /// absent when the bucket holds no tokens
    pub ppl: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RetrievalStat {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mode: String,
    pub token_count: usize,
    pub total_nll: f64,
    pub ppl: f64,
    pub bpc: f64,
    pub tau: f64,
    pub tau_prime: f64,
    pub lambda: f64,
    pub long_memory_tokens: usize,
    pub k: usize,
    pub buckets: Vec<BucketStat>,
    pub retrieval: Option<Vec<RetrievalStat>>,
}

/// Score pre-collected tokens under `cfg`; returns the report and the
/// per-token NLLs in scoring order.
pub fn score_tokens(
    scores: &[TokenScore],
    cfg: &EvalConfig,
    train_freqs: &[u64],
) -> (EvalReport, Vec<f64>) {
    let mut per_token = Vec::with_capacity(scores.len());
    let mut total = 0.0;
    let mut bucket_nll = [0.0f64; 5];
    let mut bucket_count = [0usize; 5];
    for ts in scores {
        let nll = token_nll(ts, cfg);
        total += nll;
        let b = bucket_of(train_freqs.get(ts.target as usize).copied().unwrap_or(0));
        bucket_nll[b] += nll;
        bucket_count[b] += 1;
        per_token.push(nll);
    }
    let count = scores.len();
    let buckets = (0..5)
        .map(|b| BucketStat {
            label: BUCKET_LABELS[b].to_string(),
            count: bucket_count[b],
            ppl: (bucket_count[b] > 0).then(|| (bucket_nll[b] / bucket_count[b] as f64).exp()),
        })
        .collect();
    let report = EvalReport {
        mode: cfg.mode.as_str().to_string(),
        token_count: count,
        total_nll: total,
        ppl: (total / count as f64).exp(),
        bpc: total / (count as f64 * std::f64::consts::LN_2),
        tau: cfg.tau,
        tau_prime: cfg.tau_prime,
        lambda: cfg.lambda,
        long_memory_tokens: cfg.long_memory_tokens,
        k: cfg.k,
        buckets,
        retrieval: None,
    };
    (report, per_token)
}

/// Full evaluation of a corpus: collect once, score once.
pub fn evaluate(
    ctx: &EvalContext,
    corpus: &Corpus,
    cfg: &EvalConfig,
    train_freqs: &[u64],
) -> Result<(EvalReport, Vec<f64>)> {
    let scores = collect_token_scores(ctx, corpus, cfg, cfg.long_memory_tokens)?;
    Ok(score_tokens(&scores, cfg, train_freqs))
}

/// Top-K retrieval accuracy: an eval token counts as a success at K when any
/// of the K nearest datastore entries carries the true next token.
pub fn retrieval_accuracy(
    ctx: &EvalContext,
    corpus: &Corpus,
    ds: &Datastore,
    ks: &[usize],
    seg_len: usize,
) -> Vec<RetrievalStat> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut ordered: Vec<usize> = ks.to_vec();
    ordered.sort_unstable();
    let mut success = vec![0usize; ordered.len()];
    let mut total = 0usize;
    for doc in &corpus.docs {
        for (_, key, truth) in encode_bank(ctx, &doc.tokens, seg_len) {
            let hits = knn_search_threaded(ds, &key, max_k, ctx.threads);
            total += 1;
            for (ki, &k) in ordered.iter().enumerate() {
                if hits.iter().take(k).any(|h| h.target == truth) {
                    success[ki] += 1;
                }
            }
        }
    }
    ordered
        .into_iter()
        .zip(success)
        .map(|(k, s)| RetrievalStat { k, accuracy: if total > 0 { s as f64 / total as f64 } else { 0.0 } })
        .collect()
}

/// Grid axes for tuning; axes irrelevant to the mode are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Grids {
    pub tau: Vec<f64>,
    pub tau_prime: Vec<f64>,
    pub lambda: Vec<f64>,
    pub long_memory_tokens: Vec<usize>,
}

impl Grids {
    pub fn single(cfg: &EvalConfig) -> Grids {
        Grids {
            tau: vec![cfg.tau],
            tau_prime: vec![cfg.tau_prime],
            lambda: vec![cfg.lambda],
            long_memory_tokens: vec![cfg.long_memory_tokens],
        }
    }
}

fn sorted_f64(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

/// Exhaustive dev-set grid search minimizing NLL. Ties resolve to the
/// lexicographically smallest (tau, tau', lambda, long_memory_tokens).
pub fn tune(
    ctx: &EvalContext,
    dev: &Corpus,
    base: &EvalConfig,
    grids: &Grids,
) -> Result<EvalConfig> {
    let mode = base.mode;
    let taus = if mode.single_norm_memory() { sorted_f64(grids.tau.clone()) } else { vec![base.tau] };
    let tau_primes =
        if mode.interpolates() { sorted_f64(grids.tau_prime.clone()) } else { vec![base.tau_prime] };
    let lambdas = if mode.interpolates() { sorted_f64(grids.lambda.clone()) } else { vec![base.lambda] };
    let longs = if mode.uses_long() {
        let mut v = grids.long_memory_tokens.clone();
        v.sort_unstable();
        v.dedup();
        v
    } else {
        vec![base.long_memory_tokens]
    };
    if taus.is_empty() || tau_primes.is_empty() || lambdas.is_empty() || longs.is_empty() {
        bail!("empty tuning grid");
    }

    let max_long = longs.iter().copied().max().unwrap_or(0);
    let scores = collect_token_scores(ctx, dev, base, max_long)?;
    let mut best: Option<(f64, EvalConfig)> = None;
    for &tau in &taus {
        for &tau_prime in &tau_primes {
            for &lambda in &lambdas {
                for &long_memory_tokens in &longs {
                    let cfg = EvalConfig { tau, tau_prime, lambda, long_memory_tokens, ..base.clone() };
                    let nll: f64 = scores.iter().map(|ts| token_nll(ts, &cfg)).sum();
                    if best.as_ref().map_or(true, |(b, _)| nll < *b) {
                        best = Some((nll, cfg));
                    }
                }
            }
        }
    }
    Ok(best.unwrap().1)
}
