//! A small pre-norm causal transformer exposing two representations per
//! position: `f`, the final output used against token embeddings for
//! vocabulary logits, and `g`, the input of the last feed-forward layer
//! used for similarity against memory keys.
//!
//! The `g` tap point is the output of the final block's second layer norm --
//! i.e. after the attention sublayer's residual add, exactly where the last
//! FFN reads its input.

use crate::tensor::{Tape, Tensor, Var};
use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"TRMM";
const CKPT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Positional capacity; no encoding call may exceed it.
    pub seg_len: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.layers == 0 || self.ffn_dim == 0 {
            bail!("model dims must be positive");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            bail!("dim {} must be divisible by heads {}", self.dim, self.heads);
        }
        if self.seg_len == 0 {
            bail!("segment length must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All weights, including the tied input/output embedding `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub e: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

impl ModelParams {
    /// Parameter tensors in their declared (checkpoint) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.e, &self.pos];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.push(&self.lnf_g);
        out.push(&self.lnf_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.e, &mut self.pos];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g, &mut l.ln1_b, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2_g, &mut l.ln2_b,
                &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2,
            ]);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Deterministic init: scaled normal (std 0.02) for weight matrices sampled
/// in declared order, zeros for biases, ones/zeros for layer norms.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let mut sample = |rows: usize, cols: usize| -> Tensor {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Tensor::matrix(rows, cols, data)
    };
    let (v, d, ffn) = (cfg.vocab_size, cfg.dim, cfg.ffn_dim);
    let e = sample(v, d);
    let pos = sample(cfg.seg_len, d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerParams {
            ln1_g: Tensor::vector(vec![1.0; d]),
            ln1_b: Tensor::vector(vec![0.0; d]),
            wq: sample(d, d),
            bq: Tensor::vector(vec![0.0; d]),
            wk: sample(d, d),
            bk: Tensor::vector(vec![0.0; d]),
            wv: sample(d, d),
            bv: Tensor::vector(vec![0.0; d]),
            wo: sample(d, d),
            bo: Tensor::vector(vec![0.0; d]),
            ln2_g: Tensor::vector(vec![1.0; d]),
            ln2_b: Tensor::vector(vec![0.0; d]),
            w1: sample(d, ffn),
            b1: Tensor::vector(vec![0.0; ffn]),
            w2: sample(ffn, d),
            b2: Tensor::vector(vec![0.0; d]),
        });
    }
    Ok(ModelParams {
        e,
        pos,
        layers,
        lnf_g: Tensor::vector(vec![1.0; d]),
        lnf_b: Tensor::vector(vec![0.0; d]),
    })
}

/// Tape handles for one layer's registered parameters.
#[derive(Clone, Copy)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for all parameters, in the same declared order as
/// [`ModelParams::tensors`].
pub struct ParamVars {
    pub e: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.e, self.pos];
        for l in &self.layers {
            out.extend([
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g,
                l.ln2_b, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        out.push(self.lnf_g);
        out.push(self.lnf_b);
        out
    }
}

/// Rebuild a [`ParamVars`] from tape handles listed in declared order.
/// Used by gradient checks that substitute a single parameter tensor.
pub fn assemble_param_vars(cfg: &ModelConfig, vars: &[Var]) -> ParamVars {
    assert_eq!(vars.len(), 2 + cfg.layers * 16 + 2, "wrong number of parameter vars");
    let mut it = vars.iter().copied();
    let mut next = || it.next().unwrap();
    let e = next();
    let pos = next();
    let layers = (0..cfg.layers)
        .map(|_| LayerVars {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
        .collect();
    ParamVars { e, pos, layers, lnf_g: next(), lnf_b: next() }
}

/// Register all parameters on `tape`; `trainable` decides leaf vs constant.
pub fn register_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ParamVars {
    let mut reg = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
    let e = reg(&params.e);
    let pos = reg(&params.pos);
    let mut layers = Vec::with_capacity(params.layers.len());
    for l in &params.layers {
        layers.push(LayerVars {
            ln1_g: reg(&l.ln1_g),
            ln1_b: reg(&l.ln1_b),
            wq: reg(&l.wq),
            bq: reg(&l.bq),
            wk: reg(&l.wk),
            bk: reg(&l.bk),
            wv: reg(&l.wv),
            bv: reg(&l.bv),
            wo: reg(&l.wo),
            bo: reg(&l.bo),
            ln2_g: reg(&l.ln2_g),
            ln2_b: reg(&l.ln2_b),
            w1: reg(&l.w1),
            b1: reg(&l.b1),
            w2: reg(&l.w2),
            b2: reg(&l.b2),
        });
    }
    let lnf_g = reg(&params.lnf_g);
    let lnf_b = reg(&params.lnf_b);
    ParamVars { e, pos, layers, lnf_g, lnf_b }
}

/// Per-position representations of one segment. Row t depends only on
/// tokens 0..=t and stands for the context that predicts token t+1.
pub struct SegmentVars {
    pub f: Var,
    pub g: Var,
}

/// Strictly-upper-triangular additive mask; a large negative finite value
/// rather than -inf so every op output stays finite.
fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = -1e30;
        }
    }
    Tensor::matrix(n, n, data)
}

/// Causal forward pass of one segment on `tape`.
pub fn encode_segment(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> SegmentVars {
    let n = tokens.len();
    assert!(n >= 1, "empty segment");
    assert!(n <= cfg.seg_len, "segment of {} tokens exceeds positional capacity {}", n, cfg.seg_len);
    let ids: Vec<usize> = tokens
        .iter()
        .map(|&t| {
            assert!((t as usize) < cfg.vocab_size, "token {} out of vocab {}", t, cfg.vocab_size);
            t as usize
        })
        .collect();
    let pos_ids: Vec<usize> = (0..n).collect();

    let tok_emb = tape.gather_rows(pv.e, &ids);
    let pos_emb = tape.gather_rows(pv.pos, &pos_ids);
    let mut x = tape.add(tok_emb, pos_emb);

    let heads = cfg.heads;
    let dh = cfg.dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = tape.constant(causal_mask(n));

    let mut g_tap = None;
    let last = pv.layers.len() - 1;
    for (li, l) in pv.layers.iter().enumerate() {
        let a = tape.layer_norm(x, l.ln1_g, l.ln1_b);
        let q0 = tape.matmul(a, l.wq);
        let q = tape.add_row(q0, l.bq);
        let k0 = tape.matmul(a, l.wk);
        let k = tape.add_row(k0, l.bk);
        let v0 = tape.matmul(a, l.wv);
        let v = tape.add_row(v0, l.bv);

        let mut head_ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt);
            let scaled = tape.scale(raw, scale);
            let masked = tape.add(scaled, mask);
            let lse = tape.log_sum_exp(masked, 1);
            let centered = tape.sub_col(masked, lse);
            let weights = tape.exp(centered);
            head_ctx.push(tape.matmul(weights, vh));
        }
        let ctx = if heads == 1 { head_ctx[0] } else { tape.concat_cols(&head_ctx) };
        let proj0 = tape.matmul(ctx, l.wo);
        let proj = tape.add_row(proj0, l.bo);
        x = tape.add(x, proj);

        let h_in = tape.layer_norm(x, l.ln2_g, l.ln2_b);
        if li == last {
            g_tap = Some(h_in);
        }
        let u0 = tape.matmul(h_in, l.w1);
        let u1 = tape.add_row(u0, l.b1);
        let u = tape.relu(u1);
        let ffn0 = tape.matmul(u, l.w2);
        let ffn = tape.add_row(ffn0, l.b2);
        x = tape.add(x, ffn);
    }
    let f = tape.layer_norm(x, pv.lnf_g, pv.lnf_b);
    SegmentVars { f, g: g_tap.expect("at least one layer") }
}

/// Forward pass without gradient tracking; returns plain `(f, g)` tensors.
pub fn encode_plain(params: &ModelParams, cfg: &ModelConfig, tokens: &[u32]) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, false);
    let enc = encode_segment(&mut tape, &pv, cfg, tokens);
    (tape.value(enc.f).clone(), tape.value(enc.g).clone())
}

/// Vocabulary logits for one position: `E f_row`, one dot product per token.
pub fn vocab_logits(params: &ModelParams, f_row: &[f64]) -> Vec<f64> {
    let d = params.e.cols();
    assert_eq!(f_row.len(), d, "f_row dim {} != model dim {}", f_row.len(), d);
    let v = params.e.rows();
    let mut out = Vec::with_capacity(v);
    for w in 0..v {
        let row = params.e.row(w);
        out.push(row.iter().zip(f_row).map(|(a, b)| a * b).sum());
    }
    out
}

// ---- checkpoint io -------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Binary checkpoint: magic, version, config fields, then parameter tensors
/// in declared order as little-endian f64.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {:?}", path))?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    write_u32(&mut w, cfg.vocab_size as u32)?;
    write_u32(&mut w, cfg.dim as u32)?;
    write_u32(&mut w, cfg.layers as u32)?;
    write_u32(&mut w, cfg.heads as u32)?;
    write_u32(&mut w, cfg.seg_len as u32)?;
    write_u32(&mut w, cfg.ffn_dim as u32)?;
    w.write_all(&cfg.seed.to_le_bytes())?;
    for t in params.tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("open {:?}", path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        bail!("bad checkpoint magic {:?}", magic);
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        bail!("unsupported checkpoint version {}", version);
    }
    let cfg = ModelConfig {
        vocab_size: read_u32(&mut r)? as usize,
        dim: read_u32(&mut r)? as usize,
        layers: read_u32(&mut r)? as usize,
        heads: read_u32(&mut r)? as usize,
        seg_len: read_u32(&mut r)? as usize,
        ffn_dim: read_u32(&mut r)? as usize,
        seed: read_u64(&mut r)?,
    };
    cfg.validate()?;
    let mut params = init_params(&cfg)?;
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).context("truncated checkpoint")?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!("trailing bytes in checkpoint");
    }
    Ok((cfg, params))
}
