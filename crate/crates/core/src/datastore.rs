//! External memory: every (key vector, next token) pair of a corpus,
//! materialized with the current model and searched exactly.
//!
//! Keys are the model's `g` representations, stored at f32 precision on
//! disk and widened for the scan. Search is an exact top-K maximum
//! inner-product scan with the same scaled dot-product similarity used in
//! training; ties break toward the lower entry index.

use crate::corpus::Corpus;
use crate::model::{encode_plain, ModelConfig, ModelParams};
use anyhow::{bail, Context, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DS_MAGIC: &[u8; 4] = b"TRDS";
const DS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    pub d: usize,
    /// n x d keys, f32-rounded values held as f64
    keys: Vec<f64>,
    targets: Vec<u32>,
    /// (doc id, position) of each key's context row
    provenance: Vec<(u32, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
    pub target: u32,
}

impl Datastore {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.d..(i + 1) * self.d]
    }

    pub fn target(&self, i: usize) -> u32 {
        self.targets[i]
    }

    pub fn provenance(&self, i: usize) -> (u32, u32) {
        self.provenance[i]
    }

    fn push(&mut self, key: &[f64], target: u32, doc: u32, pos: u32) {
        // round to storage precision now so in-memory search equals a
        // search over a saved-and-reloaded datastore
        self.keys.extend(key.iter().map(|&v| v as f32 as f64));
        self.targets.push(target);
        self.provenance.push((doc, pos));
    }
}

/// Encode a corpus into a datastore: one entry per predicted token, in
/// (document, position) order. Documents are encoded in consecutive windows
/// of `seg_len` tokens; the last position of each window keys the first
/// token of the next one.
pub fn build_datastore(
    params: &ModelParams,
    cfg: &ModelConfig,
    corpus: &Corpus,
    seg_len: usize,
) -> Result<Datastore> {
    if seg_len < 2 || seg_len > cfg.seg_len {
        bail!("datastore segment length {} outside [2, {}]", seg_len, cfg.seg_len);
    }
    let mut ds = Datastore { d: cfg.dim, keys: Vec::new(), targets: Vec::new(), provenance: Vec::new() };
    for doc in &corpus.docs {
        let n = doc.tokens.len();
        if n < 2 {
            continue;
        }
        if let Some(&bad) = doc.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            bail!("token {} in document {} outside model vocabulary {}", bad, doc.id, cfg.vocab_size);
        }
        let mut start = 0;
        while start < n {
            let end = (start + seg_len).min(n);
            let (_, g) = encode_plain(params, cfg, &doc.tokens[start..end]);
            for row in 0..end - start {
                let pos = start + row;
                if pos + 1 >= n {
                    break;
                }
                ds.push(g.row(row), doc.tokens[pos + 1], doc.id, pos as u32);
            }
            start = end;
        }
    }
    Ok(ds)
}

/// Scaled dot-product similarity, shared with the training objective.
pub fn similarity(query: &[f64], key: &[f64], d: usize) -> f64 {
    debug_assert_eq!(query.len(), d);
    query.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
}

fn top_k_of_range(ds: &Datastore, query: &[f64], k: usize, lo: usize, hi: usize) -> Vec<(f64, usize)> {
    let mut scored: Vec<(f64, usize)> =
        (lo..hi).map(|i| (similarity(query, ds.key(i), ds.d), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
}

/// Exact top-k scan. Returns every entry when `k >= len`, sorted by score
/// descending with ties broken by lower index.
pub fn knn_search(ds: &Datastore, query: &[f64], k: usize) -> Vec<Hit> {
    knn_search_threaded(ds, query, k, 1)
}

/// Exact top-k with the scan sharded over `threads`; shard results merge by
/// the same ordering, so the output is identical to the single-threaded scan.
pub fn knn_search_threaded(ds: &Datastore, query: &[f64], k: usize, threads: usize) -> Vec<Hit> {
    assert!(k >= 1, "k must be >= 1");
    assert_eq!(query.len(), ds.d, "query dim {} != datastore dim {}", query.len(), ds.d);
    if ds.is_empty() {
        return Vec::new();
    }
    let n = ds.len();
    let threads = threads.max(1).min(n);
    let mut merged: Vec<(f64, usize)> = if threads == 1 {
        top_k_of_range(ds, query, k, 0, n)
    } else {
        let chunk = n.div_ceil(threads);
        let mut parts: Vec<Vec<(f64, usize)>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(n);
                    scope.spawn(move || top_k_of_range(ds, query, k, lo, hi))
                })
                .collect();
            parts = handles.into_iter().map(|h| h.join().unwrap()).collect();
        });
        let mut all: Vec<(f64, usize)> = parts.into_iter().flatten().collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        all.truncate(k);
        all
    };
    merged.truncate(k);
    merged
        .into_iter()
        .map(|(score, index)| Hit { index, score, target: ds.target(index) })
        .collect()
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Little-endian layout: magic, version u32, N u64, d u32, keys (N x d f32),
/// targets (N u32), provenance (N x (doc u32, pos u32)).
pub fn save_datastore(path: &Path, ds: &Datastore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("create {:?}", path))?);
    w.write_all(DS_MAGIC)?;
    write_u32(&mut w, DS_VERSION)?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    write_u32(&mut w, ds.d as u32)?;
    for v in &ds.keys {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    for t in &ds.targets {
        w.write_all(&t.to_le_bytes())?;
    }
    for (doc, pos) in &ds.provenance {
        w.write_all(&doc.to_le_bytes())?;
        w.write_all(&pos.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_datastore(path: &Path) -> Result<Datastore> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("open {:?}", path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).context("datastore header")?;
    if &magic != DS_MAGIC {
        bail!("bad datastore magic {:?}", magic);
    }
    if read_u32(&mut r)? != DS_VERSION {
        bail!("unsupported datastore version");
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let d = read_u32(&mut r)? as usize;
    let mut keys = Vec::with_capacity(n * d);
    let mut b4 = [0u8; 4];
    for _ in 0..n * d {
        r.read_exact(&mut b4).context("truncated datastore keys")?;
        keys.push(f32::from_le_bytes(b4) as f64);
    }
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4).context("truncated datastore targets")?;
        targets.push(u32::from_le_bytes(b4));
    }
    let mut provenance = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4).context("truncated datastore provenance")?;
        let doc = u32::from_le_bytes(b4);
        r.read_exact(&mut b4).context("truncated datastore provenance")?;
        provenance.push((doc, u32::from_le_bytes(b4)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!("trailing bytes in datastore");
    }
    Ok(Datastore { d, keys, targets, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig { vocab_size: 9, dim: 8, layers: 1, heads: 2, seg_len: 16, ffn_dim: 12, seed: 2 };
        let params = init_params(&cfg).unwrap();
        (cfg, params)
    }

    fn corpus_of(docs: Vec<Vec<u32>>) -> Corpus {
        Corpus {
            docs: docs
                .into_iter()
                .enumerate()
                .map(|(i, tokens)| Document { id: i as u32, tokens })
                .collect(),
        }
    }

    #[test]
    fn one_pair_per_predicted_token() {
        let (cfg, params) = tiny_model();
        let corpus = corpus_of(vec![(0..9).chain(0..2).collect()]); // 11 tokens
        let ds = build_datastore(&params, &cfg, &corpus, 16).unwrap();
        assert_eq!(ds.len(), 10);
    }

    #[test]
    fn provenance_targets_exhaustive() {
        let (cfg, params) = tiny_model();
        let corpus = corpus_of(vec![(0..9).collect(), vec![1, 3, 5, 7, 8, 0, 2]]);
        let ds = build_datastore(&params, &cfg, &corpus, 4).unwrap();
        let expected: usize = corpus.docs.iter().map(|d| d.tokens.len() - 1).sum();
        assert_eq!(ds.len(), expected);
        for i in 0..ds.len() {
            let (doc, pos) = ds.provenance(i);
            assert_eq!(ds.target(i), corpus.docs[doc as usize].tokens[pos as usize + 1]);
        }
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let (cfg, params) = tiny_model();
        let corpus = corpus_of(vec![(0..9).collect()]);
        let a = build_datastore(&params, &cfg, &corpus, 4).unwrap();
        let b = build_datastore(&params, &cfg, &corpus, 4).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.trds"), dir.path().join("b.trds"));
        save_datastore(&p1, &a).unwrap();
        save_datastore(&p2, &b).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let (cfg, params) = tiny_model();
        let corpus = corpus_of(vec![vec![1, 2, 42]]);
        assert!(build_datastore(&params, &cfg, &corpus, 4).is_err());
    }

    fn random_ds(n: usize, d: usize, seed: u64) -> Datastore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Datastore { d, keys: Vec::new(), targets: Vec::new(), provenance: Vec::new() };
        for i in 0..n {
            let key: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ds.push(&key, rng.gen_range(0..50), 0, i as u32);
        }
        ds
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = random_ds(500, 6, 9);
        for _ in 0..50 {
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for &k in &[1usize, 7, 64, 1024] {
                let hits = knn_search(&ds, &q, k);
                // brute force: score everything, full sort, cut at k
                let mut all: Vec<(f64, usize)> =
                    (0..ds.len()).map(|i| (similarity(&q, ds.key(i), 6), i)).collect();
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
                all.truncate(k);
                assert_eq!(hits.len(), all.len());
                for (h, (score, idx)) in hits.iter().zip(&all) {
                    assert_eq!(h.index, *idx);
                    assert_eq!(h.score, *score);
                }
            }
        }
    }

    #[test]
    fn knn_exact_key_ranks_first() {
        let d = 4;
        let mut ds = Datastore { d, keys: Vec::new(), targets: Vec::new(), provenance: Vec::new() };
        ds.push(&[1.0, 0.0, 0.0, 0.0], 1, 0, 0);
        ds.push(&[0.0, 1.0, 0.0, 0.0], 2, 0, 1);
        ds.push(&[0.0, 0.0, 1.0, 0.0], 3, 0, 2);
        let hits = knn_search(&ds, &[0.0, 1.0, 0.0, 0.0], 2);
        assert_eq!(hits[0].index, 1);
        assert_eq!(hits[0].target, 2);
    }

    #[test]
    fn knn_ties_break_by_lower_index() {
        let d = 2;
        let mut ds = Datastore { d, keys: Vec::new(), targets: Vec::new(), provenance: Vec::new() };
        for i in 0..4 {
            ds.push(&[1.0, 0.0], i, 0, i);
        }
        let hits = knn_search(&ds, &[1.0, 0.0], 3);
        let idx: Vec<usize> = hits.iter().map(|h| h.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn knn_k_larger_than_store() {
        let ds = random_ds(5, 3, 1);
        let hits = knn_search(&ds, &[0.1, 0.2, 0.3], 100);
        assert_eq!(hits.len(), 5);
        for w in hits.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn threaded_scan_matches_single() {
        let ds = random_ds(997, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = knn_search_threaded(&ds, &q, 10, 1);
            let b = knn_search_threaded(&ds, &q, 10, 4);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = random_ds(37, 4, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.trds");
        save_datastore(&path, &ds).unwrap();
        let loaded = load_datastore(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn corrupted_header_rejected() {
        let ds = random_ds(5, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.trds");
        save_datastore(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_datastore(&path).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let ds = random_ds(5, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.trds");
        save_datastore(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_datastore(&path).is_err());
    }

    #[test]
    fn empty_datastore_round_trips() {
        let ds = Datastore { d: 4, keys: Vec::new(), targets: Vec::new(), provenance: Vec::new() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.trds");
        save_datastore(&path, &ds).unwrap();
        let loaded = load_datastore(&path).unwrap();
        assert!(loaded.is_empty());
        assert!(knn_search(&loaded, &[0.0; 4], 5).is_empty());
    }

    #[test]
    #[should_panic(expected = "query dim")]
    fn dim_mismatch_panics() {
        let ds = random_ds(3, 4, 0);
        knn_search(&ds, &[0.0; 3], 1);
    }
}
