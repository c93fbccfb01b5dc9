//! The training objective and optimizer.
//!
//! The next-token distribution mixes vocabulary logits with in-batch memory
//! similarities in a single normalization:
//!
//! ```text
//! P(w | c) ∝ exp(E_w · f(c)) + Σ_{j: x_j = w} exp(g(c) · g(c_j) / sqrt(d))
//! ```
//!
//! Everything is computed in log space. With no accessible memory the loss
//! degenerates exactly to the vanilla log-softmax, which is also what the
//! warmup phase uses.

use crate::batching::Batch;
use crate::memory::{Instantiation, MemorySpec};
use crate::model::{
    encode_segment, register_params, ModelConfig, ModelParams, ParamVars,
};
use crate::tensor::{lse_slice, Tape, Tensor, Var};
use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MASK_OFF: f64 = -1e30;
const STATE_MAGIC: &[u8; 4] = b"TRTS";
const STATE_VERSION: u32 = 1;

/// Log P(target) under the mixture distribution, computed entirely in log
/// space. `sims` are already scaled similarities of the query against each
/// memory pair; `mem_targets` are the pairs' target tokens.
pub fn trime_log_prob(vocab_logits: &[f64], sims: &[f64], mem_targets: &[u32], target: u32) -> f64 {
    assert_eq!(sims.len(), mem_targets.len(), "sims and mem_targets length mismatch");
    let target = target as usize;
    assert!(target < vocab_logits.len(), "target out of vocabulary");
    let mut num = vec![vocab_logits[target]];
    for (s, &t) in sims.iter().zip(mem_targets) {
        if t as usize == target {
            num.push(*s);
        }
    }
    let mut den = vocab_logits.to_vec();
    den.extend_from_slice(sims);
    lse_slice(&num) - lse_slice(&den)
}

/// Log-softmax of the vocabulary logits at `target`.
pub fn vanilla_log_prob(vocab_logits: &[f64], target: u32) -> f64 {
    assert!((target as usize) < vocab_logits.len(), "target out of vocabulary");
    vocab_logits[target as usize] - lse_slice(vocab_logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    InverseSqrt,
    Constant,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse_sqrt" => Ok(ScheduleKind::InverseSqrt),
            "constant" => Ok(ScheduleKind::Constant),
            other => bail!("unknown schedule '{}'", other),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::InverseSqrt => "inverse_sqrt",
            ScheduleKind::Constant => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `None` trains the vanilla objective throughout.
    pub instantiation: Option<Instantiation>,
    /// local-memory dropout for trime_ext
    pub p: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            instantiation: Some(Instantiation::Trime),
            p: 0.9,
            warmup_fraction: 0.05,
            total_steps: 1000,
            lr: 1e-3,
            schedule: ScheduleKind::InverseSqrt,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            bail!("warmup fraction {} outside [0, 1]", self.warmup_fraction);
        }
        if self.lr <= 0.0 {
            bail!("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.p) {
            bail!("p = {} outside [0, 1]", self.p);
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub mem_hit_frac: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Mean negative log-likelihood of a batch on `tape`; gradients flow into
/// the query representations, the token embeddings and every memory key.
pub fn batch_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &Batch,
    spec: &MemorySpec,
    use_memory: bool,
) -> Var {
    let n_slots = batch.slots.len();
    let encodings: Vec<_> =
        batch.slots.iter().map(|s| encode_segment(tape, pv, cfg, &s.tokens)).collect();

    // queries and pairs are slot-major, so per-slot gathers concatenate into
    // exactly the spec order
    let mut f_parts = Vec::new();
    let mut g_parts = Vec::new();
    let mut k_parts = Vec::new();
    for slot in 0..n_slots {
        let q_rows: Vec<usize> =
            spec.queries.iter().filter(|q| q.slot == slot).map(|q| q.row).collect();
        if !q_rows.is_empty() {
            f_parts.push(tape.gather_rows(encodings[slot].f, &q_rows));
            g_parts.push(tape.gather_rows(encodings[slot].g, &q_rows));
        }
        let p_rows: Vec<usize> =
            spec.pairs.iter().filter(|p| p.slot == slot).map(|p| p.position).collect();
        if !p_rows.is_empty() {
            k_parts.push(tape.gather_rows(encodings[slot].g, &p_rows));
        }
    }
    assert!(!f_parts.is_empty(), "batch has no scorable positions");
    let f_q = tape.concat_rows(&f_parts);
    let e_t = tape.transpose(pv.e);
    let logits = tape.matmul(f_q, e_t);
    let targets: Vec<usize> = spec.queries.iter().map(|q| q.target as usize).collect();
    let target_col = tape.select_per_row(logits, &targets);

    let n_queries = spec.queries.len();
    let n_pairs = spec.pairs.len();
    let (den, num) = if use_memory && n_pairs > 0 {
        let g_q = tape.concat_rows(&g_parts);
        let keys = tape.concat_rows(&k_parts);
        let keys_t = tape.transpose(keys);
        let raw = tape.matmul(g_q, keys_t);
        let sims = tape.scale(raw, 1.0 / (cfg.dim as f64).sqrt());

        let mut access = vec![MASK_OFF; n_queries * n_pairs];
        let mut matching = vec![MASK_OFF; n_queries * n_pairs];
        for q in 0..n_queries {
            for p in 0..n_pairs {
                if spec.accessible(q, p) {
                    access[q * n_pairs + p] = 0.0;
                    if spec.pairs[p].target == spec.queries[q].target {
                        matching[q * n_pairs + p] = 0.0;
                    }
                }
            }
        }
        let access = tape.constant(Tensor::matrix(n_queries, n_pairs, access));
        let matching = tape.constant(Tensor::matrix(n_queries, n_pairs, matching));
        let sims_accessible = tape.add(sims, access);
        let sims_matching = tape.add(sims, matching);
        let den_terms = tape.concat_cols(&[logits, sims_accessible]);
        let num_terms = tape.concat_cols(&[target_col, sims_matching]);
        (tape.log_sum_exp(den_terms, 1), tape.log_sum_exp(num_terms, 1))
    } else {
        (tape.log_sum_exp(logits, 1), tape.log_sum_exp(target_col, 1))
    };

    let nll = tape.sub(den, num);
    let total = tape.sum_all(nll);
    tape.scale(total, 1.0 / n_queries as f64)
}

/// Model state plus Adam moments; one instance drives a whole training run.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub params: ModelParams,
    pub cfg: TrainConfig,
    pub step: usize,
    opt_m: Vec<Vec<f64>>,
    opt_v: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, params: ModelParams, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        Ok(Trainer {
            model_cfg,
            params,
            cfg,
            step: 0,
            opt_m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            opt_v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn warmup_steps(&self) -> usize {
        self.cfg.warmup_steps()
    }

    /// Whether the memory objective is active at `step`.
    pub fn memory_active(&self, step: usize) -> bool {
        self.cfg.instantiation.is_some() && step >= self.warmup_steps()
    }

    /// Linear warmup into the configured schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if warmup > 0 && step < warmup {
            return self.cfg.lr * (step + 1) as f64 / warmup as f64;
        }
        match self.cfg.schedule {
            ScheduleKind::Constant => self.cfg.lr,
            ScheduleKind::InverseSqrt => {
                self.cfg.lr * (warmup.max(1) as f64 / (step + 1) as f64).sqrt()
            }
        }
    }

    /// One optimizer step on one batch. `spec` must have been built for this
    /// batch and the configured instantiation.
    pub fn train_step(&mut self, batch: &Batch, spec: &MemorySpec) -> Result<StepReport> {
        let use_memory = self.memory_active(self.step);
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, &self.params, true);
        let loss = batch_loss(&mut tape, &pv, &self.model_cfg, batch, spec, use_memory);
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            bail!("non-finite loss {} at step {}", loss_val, self.step);
        }
        tape.backward(loss);

        let lr = self.lr_at(self.step);
        let t = (self.step + 1) as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        let vars = pv.vars();
        let mut grad_sq = 0.0;
        let mut tensors = self.params.tensors_mut();
        for (i, var) in vars.iter().enumerate() {
            let numel = tensors[i].numel();
            let zero;
            let g: &[f64] = match tape.grad(*var) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; numel];
                    &zero
                }
            };
            let m = &mut self.opt_m[i];
            let v = &mut self.opt_v[i];
            let w = tensors[i].data_mut();
            for j in 0..numel {
                let gj = g[j];
                grad_sq += gj * gj;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }

        let report = StepReport {
            step: self.step,
            loss: loss_val,
            mem_hit_frac: if use_memory { spec.hit_fraction() } else { 0.0 },
            grad_norm: grad_sq.sqrt(),
            lr,
        };
        self.step += 1;
        Ok(report)
    }

    /// Persist optimizer moments and the step counter next to a checkpoint,
    /// enabling bit-identical resumption.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        w.write_all(&(self.step as u64).to_le_bytes())?;
        w.write_all(&(self.opt_m.len() as u64).to_le_bytes())?;
        for (m, v) in self.opt_m.iter().zip(&self.opt_v) {
            for x in m.iter().chain(v.iter()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATE_MAGIC {
            bail!("bad train state magic");
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        if u32::from_le_bytes(buf4) != STATE_VERSION {
            bail!("unsupported train state version");
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        self.step = u64::from_le_bytes(buf8) as usize;
        r.read_exact(&mut buf8)?;
        if u64::from_le_bytes(buf8) as usize != self.opt_m.len() {
            bail!("train state parameter count mismatch");
        }
        for i in 0..self.opt_m.len() {
            for j in 0..self.opt_m[i].len() {
                r.read_exact(&mut buf8)?;
                self.opt_m[i][j] = f64::from_le_bytes(buf8);
            }
            for j in 0..self.opt_v[i].len() {
                r.read_exact(&mut buf8)?;
                self.opt_v[i][j] = f64::from_le_bytes(buf8);
            }
        }
        Ok(())
    }
}
