//! Memory construction: which in-batch context-target pairs each query may
//! attend to under the three model instantiations.
//!
//! Indexing convention: context position t predicts token t (0-based). The
//! pair stored at position j carries the representation row j and the token
//! at j+1 of its document stream, so a segment of L tokens yields L-1
//! within-segment pairs plus one boundary pair whose target is the first
//! token of the next segment. Queries and local memory use within-segment
//! pairs only; long-range and cross-segment memory also expose the boundary
//! pair, so every earlier full segment contributes exactly L pairs.

use crate::batching::{Batch, BatchStrategy, Segment};
use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instantiation {
    Trime,
    TrimeLong,
    TrimeExt,
}

impl Instantiation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trime" => Ok(Instantiation::Trime),
            "trime_long" => Ok(Instantiation::TrimeLong),
            "trime_ext" => Ok(Instantiation::TrimeExt),
            other => bail!("unknown instantiation '{}'", other),
        }
    }
}

impl fmt::Display for Instantiation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Instantiation::Trime => "trime",
            Instantiation::TrimeLong => "trime_long",
            Instantiation::TrimeExt => "trime_ext",
        };
        f.write_str(s)
    }
}

/// One in-batch context-target pair: representation row `position` of the
/// segment in `slot`, predicting `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub slot: usize,
    pub position: usize,
    pub target: u32,
    pub doc: u32,
    pub ordinal: usize,
}

/// One scored position: representation row `row` of the segment in `slot`,
/// predicting `target` = token row+1 of that segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryRef {
    pub slot: usize,
    pub row: usize,
    pub target: u32,
    pub doc: u32,
    pub ordinal: usize,
}

/// Per-query accessibility of every in-batch pair.
pub struct MemorySpec {
    pub instantiation: Option<Instantiation>,
    pub pairs: Vec<PairRef>,
    pub queries: Vec<QueryRef>,
    /// row-major `queries.len() x pairs.len()`
    mask: Vec<bool>,
    /// whether local memory was dropped for each query (trime_ext only)
    pub local_dropped: Vec<bool>,
}

impl MemorySpec {
    pub fn accessible(&self, query: usize, pair: usize) -> bool {
        self.mask[query * self.pairs.len() + pair]
    }

    /// Pairs accessible to one query.
    pub fn memory_of(&self, query: usize) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&p| self.accessible(query, p)).collect()
    }

    /// Fraction of queries with at least one accessible pair whose target
    /// matches the query target.
    pub fn hit_fraction(&self) -> f64 {
        if self.queries.is_empty() {
            return 0.0;
        }
        let hits = (0..self.queries.len())
            .filter(|&q| {
                (0..self.pairs.len())
                    .any(|p| self.accessible(q, p) && self.pairs[p].target == self.queries[q].target)
            })
            .count();
        hits as f64 / self.queries.len() as f64
    }

    /// A spec with the same queries and no accessible pairs (vanilla loss).
    pub fn empty_like(&self) -> MemorySpec {
        MemorySpec {
            instantiation: None,
            pairs: Vec::new(),
            queries: self.queries.clone(),
            mask: Vec::new(),
            local_dropped: vec![false; self.queries.len()],
        }
    }

    /// Queries of a batch with no memory at all (vanilla objective).
    pub fn vanilla(batch: &Batch) -> MemorySpec {
        let queries: Vec<QueryRef> = batch
            .slots
            .iter()
            .enumerate()
            .flat_map(|(slot, seg)| segment_queries(slot, seg))
            .collect();
        let n = queries.len();
        MemorySpec {
            instantiation: None,
            pairs: Vec::new(),
            queries,
            mask: Vec::new(),
            local_dropped: vec![false; n],
        }
    }
}

/// Local memory of the context at position t: the pairs at positions
/// 0 ..= t-2, i.e. all strictly earlier pairs of the same segment. Empty
/// for t <= 1.
pub fn local_memory(t: usize) -> Range<usize> {
    0..t.saturating_sub(1)
}

/// Long-term memory of a context in the segment with 0-based `ordinal`:
/// every pair of every earlier segment of the same document, boundary pairs
/// included. Returns (ordinal, position) indices.
pub fn long_memory(doc_segments: &[Segment], ordinal: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for seg in doc_segments.iter().filter(|s| s.ordinal < ordinal) {
        let n_pairs = seg.tokens.len() - 1 + usize::from(seg.next_token.is_some());
        for pos in 0..n_pairs {
            out.push((seg.ordinal, pos));
        }
    }
    out
}

/// All pairs a segment exposes to the batch: positions 0..len-1 with target
/// token position+1 of the segment, plus the boundary pair when the document
/// continues.
pub fn segment_pairs(slot: usize, seg: &Segment) -> Vec<PairRef> {
    let len = seg.tokens.len();
    let mut out = Vec::with_capacity(len);
    for position in 0..len.saturating_sub(1) {
        out.push(PairRef {
            slot,
            position,
            target: seg.tokens[position + 1],
            doc: seg.doc,
            ordinal: seg.ordinal,
        });
    }
    if let Some(next) = seg.next_token {
        out.push(PairRef { slot, position: len - 1, target: next, doc: seg.doc, ordinal: seg.ordinal });
    }
    out
}

/// Scored positions of a segment: rows 0..len-1 predicting the next
/// within-segment token.
pub fn segment_queries(slot: usize, seg: &Segment) -> Vec<QueryRef> {
    (0..seg.tokens.len().saturating_sub(1))
        .map(|row| QueryRef {
            slot,
            row,
            target: seg.tokens[row + 1],
            doc: seg.doc,
            ordinal: seg.ordinal,
        })
        .collect()
}

/// Build the training memory for a batch.
///
/// * `trime`: local pairs only.
/// * `trime_long`: local plus every pair of in-batch earlier segments of the
///   same document; requires consecutive batching with m >= 2.
/// * `trime_ext`: every pair of the other in-batch segments, plus local
///   memory unless dropped for that query (each query independently with
///   probability `p`); requires BM25 batching.
pub fn build_train_memory(
    batch: &Batch,
    instantiation: Instantiation,
    p: f64,
    seed: u64,
) -> Result<MemorySpec> {
    if !(0.0..=1.0).contains(&p) {
        bail!("local-memory dropout p = {} outside [0, 1]", p);
    }
    match (instantiation, batch.strategy) {
        (Instantiation::TrimeLong, BatchStrategy::Consecutive { m }) if m >= 2 => {}
        (Instantiation::TrimeLong, other) => {
            bail!("trime_long needs consecutive batching with m >= 2, got {:?}", other)
        }
        (Instantiation::TrimeExt, BatchStrategy::Bm25 { .. }) => {}
        (Instantiation::TrimeExt, other) => bail!("trime_ext needs bm25 batching, got {:?}", other),
        (Instantiation::Trime, _) => {}
    }

    let mut pairs = Vec::new();
    let mut queries = Vec::new();
    for (slot, seg) in batch.slots.iter().enumerate() {
        pairs.extend(segment_pairs(slot, seg));
        queries.extend(segment_queries(slot, seg));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local_dropped: Vec<bool> = match instantiation {
        Instantiation::TrimeExt => queries.iter().map(|_| rng.gen_bool(p)).collect(),
        _ => vec![false; queries.len()],
    };

    let mut mask = vec![false; queries.len() * pairs.len()];
    for (qi, q) in queries.iter().enumerate() {
        let local = local_memory(q.row + 1);
        for (pi, pr) in pairs.iter().enumerate() {
            let is_local = pr.slot == q.slot && local.contains(&pr.position);
            let ok = match instantiation {
                Instantiation::Trime => is_local,
                Instantiation::TrimeLong => {
                    is_local || (pr.slot != q.slot && pr.doc == q.doc && pr.ordinal < q.ordinal)
                }
                Instantiation::TrimeExt => {
                    (is_local && !local_dropped[qi]) || pr.slot != q.slot
                }
            };
            mask[qi * pairs.len() + pi] = ok;
        }
    }
    Ok(MemorySpec { instantiation: Some(instantiation), pairs, queries, mask, local_dropped })
}
