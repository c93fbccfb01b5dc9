//! Data batching: random segments, consecutive same-document runs, and
//! BM25-packed lexically similar segments.
//!
//! The BM25 packer chains segments greedily: starting from a random segment,
//! it repeatedly appends the highest-scoring unused neighbor among the
//! current segment's top-k, restarting from a fresh random segment when the
//! whole top-k is used up, then chunks the chain into batches.

use crate::corpus::{detokenize_chars, Corpus, TokenizerMode, Vocab};
use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// One fixed-length slice of a document. `next_token` is the first token of
/// the following segment, used as the target of the boundary pair; `None` at
/// document end.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// Position in the corpus-wide segment list (stable across batching).
    pub id: usize,
    pub doc: u32,
    pub ordinal: usize,
    pub tokens: Vec<u32>,
    pub next_token: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchStrategy {
    Random,
    Consecutive { m: usize },
    Bm25 { k: usize },
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub slots: Vec<Segment>,
    pub strategy: BatchStrategy,
}

/// Split every document into consecutive segments of at most `max_len`
/// tokens; the final short segment is kept. Empty documents are skipped
/// with a warning.
pub fn segment_corpus(corpus: &Corpus, max_len: usize) -> Vec<Segment> {
    assert!(max_len >= 2, "segment length must be >= 2");
    let mut out = Vec::new();
    for doc in &corpus.docs {
        if doc.tokens.is_empty() {
            eprintln!("warning: skipping empty document {}", doc.id);
            continue;
        }
        for (ordinal, chunk) in doc.tokens.chunks(max_len).enumerate() {
            let end = (ordinal + 1) * max_len;
            out.push(Segment {
                id: out.len(),
                doc: doc.id,
                ordinal,
                tokens: chunk.to_vec(),
                next_token: doc.tokens.get(end).copied(),
            });
        }
    }
    out
}

fn chunk_into_batches(segments: Vec<Segment>, batch_size: usize, strategy: BatchStrategy) -> Vec<Batch> {
    let mut batches = Vec::new();
    let mut slots = Vec::with_capacity(batch_size);
    for seg in segments {
        slots.push(seg);
        if slots.len() == batch_size {
            batches.push(Batch { slots: std::mem::take(&mut slots), strategy });
            slots.reserve(batch_size);
        }
    }
    if !slots.is_empty() {
        batches.push(Batch { slots, strategy });
    }
    batches
}

/// A seeded permutation of the segments, chunked into batches of `b`.
pub fn batch_random(segments: &[Segment], b: usize, seed: u64) -> Vec<Batch> {
    assert!(b >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..segments.len()).collect();
    shuffle(&mut order, seed);
    let shuffled = order.into_iter().map(|i| segments[i].clone()).collect();
    chunk_into_batches(shuffled, b, BatchStrategy::Random)
}

/// Runs of `m` consecutive segments per document, shuffled at the run level
/// and chunked into batches of `b` slots. Within a batch a document's
/// segments stay in ordinal order.
pub fn batch_consecutive(segments: &[Segment], b: usize, m: usize, seed: u64) -> Vec<Batch> {
    assert!(b >= 1 && m >= 1, "batch size and m must be >= 1");
    assert!(m <= b, "m = {} cannot exceed batch size {}", m, b);
    // group by document preserving ordinal order
    let mut by_doc: Vec<(u32, Vec<&Segment>)> = Vec::new();
    for seg in segments {
        match by_doc.last_mut() {
            Some((doc, list)) if *doc == seg.doc => list.push(seg),
            _ => by_doc.push((seg.doc, vec![seg])),
        }
    }
    let mut runs: Vec<Vec<Segment>> = Vec::new();
    for (_, list) in &by_doc {
        for run in list.chunks(m) {
            runs.push(run.iter().map(|s| (*s).clone()).collect());
        }
    }
    let mut order: Vec<usize> = (0..runs.len()).collect();
    shuffle(&mut order, seed);
    let flat: Vec<Segment> = order.into_iter().flat_map(|i| runs[i].clone()).collect();
    chunk_into_batches(flat, b, BatchStrategy::Consecutive { m })
}

fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

// ---- BM25 -----------------------------------------------------------------

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Inverted index over segment term lists with Okapi BM25 scoring.
///
/// Terms are the model's tokens in word mode; in char mode, segments are
/// scored over the whitespace-delimited words of their detokenized text so
/// that lexical overlap keeps its meaning.
pub struct Bm25Index {
    k1: f64,
    b: f64,
    n_segments: usize,
    avg_len: f64,
    /// per-segment distinct terms with counts, term-sorted
    seg_terms: Vec<Vec<(u32, u32)>>,
    seg_len: Vec<f64>,
    df: HashMap<u32, u32>,
    /// term -> (segment id, term frequency), segment ids ascending
    postings: HashMap<u32, Vec<(u32, u32)>>,
}

/// Term lists used for BM25, one per segment, in segment order.
pub fn bm25_term_lists(segments: &[Segment], vocab: &Vocab, mode: TokenizerMode) -> Vec<Vec<u32>> {
    match mode {
        TokenizerMode::Word => segments.iter().map(|s| s.tokens.clone()).collect(),
        TokenizerMode::Char => {
            let mut dict: HashMap<String, u32> = HashMap::new();
            segments
                .iter()
                .map(|s| {
                    let text = detokenize_chars(vocab, &s.tokens);
                    text.split_whitespace()
                        .map(|w| {
                            let next = dict.len() as u32;
                            *dict.entry(w.to_string()).or_insert(next)
                        })
                        .collect()
                })
                .collect()
        }
    }
}

impl Bm25Index {
    pub fn build(term_lists: &[Vec<u32>], k1: f64, b: f64) -> Bm25Index {
        let n_segments = term_lists.len();
        let mut seg_terms = Vec::with_capacity(n_segments);
        let mut seg_len = Vec::with_capacity(n_segments);
        let mut df: HashMap<u32, u32> = HashMap::new();
        let mut postings: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
        for (sid, terms) in term_lists.iter().enumerate() {
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for &t in terms {
                *counts.entry(t).or_insert(0) += 1;
            }
            let mut counted: Vec<(u32, u32)> = counts.into_iter().collect();
            counted.sort_unstable();
            for &(t, c) in &counted {
                *df.entry(t).or_insert(0) += 1;
                postings.entry(t).or_default().push((sid as u32, c));
            }
            seg_len.push(terms.len() as f64);
            seg_terms.push(counted);
        }
        let total: f64 = seg_len.iter().sum();
        let avg_len = if n_segments > 0 { (total / n_segments as f64).max(1e-9) } else { 1.0 };
        Bm25Index { k1, b, n_segments, avg_len, seg_terms, seg_len, df, postings }
    }

    pub fn len(&self) -> usize {
        self.n_segments
    }

    pub fn is_empty(&self) -> bool {
        self.n_segments == 0
    }

    fn idf(&self, term: u32) -> f64 {
        let n = self.n_segments as f64;
        let df = *self.df.get(&term).unwrap_or(&0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn length_norm(&self, sid: usize) -> f64 {
        1.0 - self.b + self.b * self.seg_len[sid] / self.avg_len
    }

    /// BM25 score of `candidate` for the distinct terms of `query`:
    /// sum of idf(t) * tf (k1+1) / (tf + k1 (1 - b + b len/avglen)).
    pub fn score(&self, query: usize, candidate: usize) -> f64 {
        let norm = self.length_norm(candidate);
        let mut total = 0.0;
        for &(term, _) in &self.seg_terms[query] {
            let tf = self.seg_terms[candidate]
                .binary_search_by_key(&term, |&(t, _)| t)
                .map(|i| self.seg_terms[candidate][i].1 as f64)
                .unwrap_or(0.0);
            if tf > 0.0 {
                total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        total
    }

    /// BM25 scores of `query` against every other segment, by accumulating
    /// over the postings of the query's distinct terms.
    fn score_all(&self, query: usize) -> Vec<f64> {
        let mut scores = vec![0.0; self.n_segments];
        for &(term, _) in &self.seg_terms[query] {
            let idf = self.idf(term);
            if let Some(post) = self.postings.get(&term) {
                for &(sid, tf) in post {
                    let tf = tf as f64;
                    scores[sid as usize] +=
                        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * self.length_norm(sid as usize));
                }
            }
        }
        scores
    }

    /// The k most similar segments to `query`, excluding `query` itself,
    /// ranked by score descending with ties broken by lower segment id.
    pub fn sim_seg(&self, query: usize, k: usize) -> Vec<usize> {
        let scores = self.score_all(query);
        let mut ids: Vec<usize> = (0..self.n_segments).filter(|&i| i != query).collect();
        let cmp = |a: &usize, b: &usize| {
            scores[*b].partial_cmp(&scores[*a]).unwrap().then_with(|| a.cmp(b))
        };
        if k < ids.len() {
            ids.select_nth_unstable_by(k - 1, cmp);
            ids.truncate(k);
        }
        ids.sort_by(cmp);
        ids
    }
}

/// Chain-pack segments by BM25 similarity and chunk the chain into batches
/// of `b` segments. `k` is the neighborhood width consulted at each step.
pub fn pack_bm25(
    segments: &[Segment],
    index: &Bm25Index,
    b: usize,
    k: usize,
    seed: u64,
) -> Vec<Batch> {
    assert!(b >= 1 && k >= 1, "batch size and k must be >= 1");
    assert_eq!(index.len(), segments.len(), "index and segment list disagree");
    let n = segments.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // remaining set with O(1) removal: position of each live id
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut pos_of: Vec<Option<usize>> = (0..n).map(Some).collect();
    let remove = |remaining: &mut Vec<usize>, pos_of: &mut Vec<Option<usize>>, id: usize| {
        let pos = pos_of[id].expect("removing a segment twice");
        let last = *remaining.last().unwrap();
        remaining.swap_remove(pos);
        pos_of[id] = None;
        if last != id {
            pos_of[last] = Some(pos);
        }
    };

    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut current: Option<usize> = None;
    while !remaining.is_empty() {
        let c = match current {
            Some(c) => c,
            None => remaining[rng.gen_range(0..remaining.len())],
        };
        chain.push(c);
        remove(&mut remaining, &mut pos_of, c);
        current = index.sim_seg(c, k).into_iter().find(|&cand| pos_of[cand].is_some());
    }

    let ordered: Vec<Segment> = chain.into_iter().map(|i| segments[i].clone()).collect();
    chunk_into_batches(ordered, b, BatchStrategy::Bm25 { k })
}

/// Mean over batches of the mean pairwise BM25 score inside each batch.
/// Single-slot batches contribute nothing.
pub fn mean_within_batch_score(index: &Bm25Index, batches: &[Batch]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let ids: Vec<usize> = batch.slots.iter().map(|s| s.id).collect();
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                // symmetrize: score is not symmetric in query/candidate
                total += 0.5 * (index.score(ids[i], ids[j]) + index.score(ids[j], ids[i]));
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Text cache of a batch order: one line per batch of comma-separated
/// `doc:ordinal` entries.
pub fn save_batch_order(path: &Path, batches: &[Batch]) -> Result<()> {
    let mut out = String::new();
    for batch in batches {
        let mut first = true;
        for slot in &batch.slots {
            if !first {
                out.push(',');
            }
            write!(out, "{}:{}", slot.doc, slot.ordinal).unwrap();
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_batch_order(path: &Path) -> Result<Vec<Vec<(u32, usize)>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let mut batch = Vec::new();
        for entry in line.split(',') {
            let (doc, ordinal) = match entry.split_once(':') {
                Some(pair) => pair,
                None => bail!("malformed batch order entry '{}'", entry),
            };
            batch.push((doc.parse()?, ordinal.parse()?));
        }
        out.push(batch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn corpus_of(docs: Vec<Vec<u32>>) -> Corpus {
        Corpus {
            docs: docs
                .into_iter()
                .enumerate()
                .map(|(i, tokens)| Document { id: i as u32, tokens })
                .collect(),
        }
    }

    fn multiset_ids(batches: &[Batch]) -> Vec<usize> {
        let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.slots.iter().map(|s| s.id)).collect();
        ids.sort_unstable();
        ids
    }

    #[test]
    fn segmentation_lengths() {
        let corpus = corpus_of(vec![(0..10).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let lens: Vec<usize> = segs.iter().map(|s| s.tokens.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        assert_eq!(segs[0].next_token, Some(4));
        assert_eq!(segs[1].next_token, Some(8));
        assert_eq!(segs[2].next_token, None);
    }

    #[test]
    fn segmentation_exact_fit() {
        let corpus = corpus_of(vec![(0..4).collect()]);
        let segs = segment_corpus(&corpus, 4);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].next_token, None);
    }

    #[test]
    fn segmentation_round_trip() {
        let corpus = corpus_of(vec![(0..23).collect(), (100..107).collect()]);
        let segs = segment_corpus(&corpus, 5);
        for doc in &corpus.docs {
            let mut rebuilt = Vec::new();
            for seg in segs.iter().filter(|s| s.doc == doc.id) {
                assert_eq!(seg.ordinal, rebuilt.len() / 5);
                rebuilt.extend_from_slice(&seg.tokens);
            }
            assert_eq!(rebuilt, doc.tokens);
        }
    }

    #[test]
    fn random_batching_is_a_permutation() {
        let corpus = corpus_of(vec![(0..50).collect(), (0..17).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let batches = batch_random(&segs, 3, 9);
        assert_eq!(multiset_ids(&batches), (0..segs.len()).collect::<Vec<_>>());
        for b in &batches[..batches.len() - 1] {
            assert_eq!(b.slots.len(), 3);
        }
    }

    #[test]
    fn random_batching_deterministic_and_seed_sensitive() {
        let corpus = corpus_of(vec![(0..40).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let a = batch_random(&segs, 4, 1);
        let b = batch_random(&segs, 4, 1);
        let c = batch_random(&segs, 4, 2);
        let order = |bs: &[Batch]| -> Vec<usize> { bs.iter().flat_map(|b| b.slots.iter().map(|s| s.id)).collect() };
        assert_eq!(order(&a), order(&b));
        assert_ne!(order(&a), order(&c));
    }

    #[test]
    fn oversized_batch_holds_everything() {
        let corpus = corpus_of(vec![(0..12).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let batches = batch_random(&segs, 100, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].slots.len(), 3);
    }

    #[test]
    fn consecutive_batching_ordinals_in_order() {
        // two docs x 8 segments, m=4, B=8 -> two doc runs per batch
        let corpus = corpus_of(vec![(0..32).collect(), (50..82).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let batches = batch_consecutive(&segs, 8, 4, 3);
        assert_eq!(multiset_ids(&batches), (0..segs.len()).collect::<Vec<_>>());
        for batch in &batches {
            let mut last: HashMap<u32, usize> = HashMap::new();
            let mut runs_seen = 0;
            let mut prev_doc = None;
            for slot in &batch.slots {
                if let Some(&prev) = last.get(&slot.doc) {
                    assert!(slot.ordinal > prev, "ordinals out of order within batch");
                }
                last.insert(slot.doc, slot.ordinal);
                if prev_doc != Some(slot.doc) {
                    runs_seen += 1;
                    prev_doc = Some(slot.doc);
                }
            }
            assert!(runs_seen <= 2, "at most B/m document runs per full batch");
        }
    }

    #[test]
    fn consecutive_m1_partitions() {
        let corpus = corpus_of(vec![(0..20).collect(), (0..9).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let batches = batch_consecutive(&segs, 4, 1, 7);
        assert_eq!(multiset_ids(&batches), (0..segs.len()).collect::<Vec<_>>());
    }

    #[test]
    fn bm25_no_shared_terms_scores_zero() {
        let lists = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        assert_eq!(idx.score(0, 1), 0.0);
    }

    #[test]
    fn bm25_self_copy_is_maximal() {
        // segment 1 is a copy of 0; 2 shares only one term
        let lists = vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![0, 9, 9, 9]];
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        let copy = idx.score(0, 1);
        let partial = idx.score(0, 2);
        assert!(copy > 0.0);
        assert!(copy > partial, "copy {} should beat partial {}", copy, partial);
    }

    #[test]
    fn bm25_hand_computed_value() {
        // Three segments over a tiny term universe:
        //   s0: [a a b]   s1: [a c]   s2: [b b b c]
        // with a=0, b=1, c=2. N = 3, lengths 3, 2, 4, avg = 3.
        // df(a) = 2, df(b) = 2, df(c) = 2 -> idf = ln((3-2+0.5)/(2+0.5)+1) = ln(1.6)
        // score(query=s0, candidate=s2): distinct query terms {a, b};
        //   a: tf 0 -> no contribution
        //   b: tf 3, norm = 1-0.75+0.75*4/3 = 1.25
        //      ln(1.6) * 3*2.2 / (3 + 1.2*1.25) = ln(1.6) * 6.6/4.5
        let lists = vec![vec![0, 0, 1], vec![0, 2], vec![1, 1, 1, 2]];
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        let expected = (1.6f64).ln() * 6.6 / 4.5;
        assert!((idx.score(0, 2) - expected).abs() < 1e-12);
    }

    fn dup_family_segments(n_per_family: usize) -> Vec<Segment> {
        // family A uses tokens 0..8, family B uses 100..108
        let mut segs = Vec::new();
        for i in 0..n_per_family * 2 {
            let base: Vec<u32> = if i % 2 == 0 { (0..8).collect() } else { (100..108).collect() };
            segs.push(Segment { id: i, doc: i as u32, ordinal: 0, tokens: base, next_token: None });
        }
        segs
    }

    #[test]
    fn pack_bm25_partitions_and_clusters_families() {
        let segs = dup_family_segments(8);
        let lists: Vec<Vec<u32>> = segs.iter().map(|s| s.tokens.clone()).collect();
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        let batches = pack_bm25(&segs, &idx, 4, 20, 5);
        assert_eq!(multiset_ids(&batches), (0..segs.len()).collect::<Vec<_>>());
        // each full batch should be pure one-family
        for batch in batches.iter().filter(|b| b.slots.len() == 4) {
            let fams: Vec<bool> = batch.slots.iter().map(|s| s.tokens[0] < 100).collect();
            assert!(fams.iter().all(|&f| f == fams[0]), "mixed-family batch {:?}", fams);
        }
        let packed_score = mean_within_batch_score(&idx, &batches);
        let random_score = mean_within_batch_score(&idx, &batch_random(&segs, 4, 5));
        assert!(packed_score > random_score, "{} vs {}", packed_score, random_score);
    }

    #[test]
    fn pack_bm25_large_k_never_restarts() {
        // Disjoint vocabularies: every score is zero, so SimSeg ranks purely
        // by id. With k >= |S| the chain still never dies; after the single
        // random start it must walk the remaining ids in ascending order,
        // which a random restart would break.
        let segs: Vec<Segment> = (0..10)
            .map(|i| Segment {
                id: i,
                doc: i as u32,
                ordinal: 0,
                tokens: vec![i as u32 * 2, i as u32 * 2 + 1],
                next_token: None,
            })
            .collect();
        let lists: Vec<Vec<u32>> = segs.iter().map(|s| s.tokens.clone()).collect();
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        let batches = pack_bm25(&segs, &idx, 3, 100, 1);
        assert_eq!(multiset_ids(&batches), (0..10).collect::<Vec<_>>());
        let flat: Vec<usize> = batches.iter().flat_map(|b| b.slots.iter().map(|s| s.id)).collect();
        let tail = &flat[1..];
        let mut expected: Vec<usize> = (0..10).filter(|i| *i != flat[0]).collect();
        expected.sort_unstable();
        assert_eq!(tail, &expected[..]);
    }

    #[test]
    fn sim_seg_excludes_self_and_breaks_ties_by_id() {
        let lists = vec![vec![0, 1], vec![0, 1], vec![0, 1], vec![9]];
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        let top = idx.sim_seg(1, 3);
        assert!(!top.contains(&1));
        // segments 0 and 2 tie exactly; lower id first, zero-score 3 last
        assert_eq!(top, vec![0, 2, 3]);
    }

    #[test]
    fn pack_bm25_deterministic() {
        let segs = dup_family_segments(6);
        let lists: Vec<Vec<u32>> = segs.iter().map(|s| s.tokens.clone()).collect();
        let idx = Bm25Index::build(&lists, BM25_K1, BM25_B);
        let a: Vec<usize> = pack_bm25(&segs, &idx, 4, 3, 11).iter().flat_map(|b| b.slots.iter().map(|s| s.id)).collect();
        let b: Vec<usize> = pack_bm25(&segs, &idx, 4, 3, 11).iter().flat_map(|b| b.slots.iter().map(|s| s.id)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_order_cache_round_trip() {
        let corpus = corpus_of(vec![(0..16).collect()]);
        let segs = segment_corpus(&corpus, 4);
        let batches = batch_random(&segs, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("order.txt");
        save_batch_order(&path, &batches).unwrap();
        let loaded = load_batch_order(&path).unwrap();
        assert_eq!(loaded.len(), batches.len());
        for (line, batch) in loaded.iter().zip(&batches) {
            let expected: Vec<(u32, usize)> = batch.slots.iter().map(|s| (s.doc, s.ordinal)).collect();
            assert_eq!(line, &expected);
        }
    }
}
