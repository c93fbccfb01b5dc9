//! Synthetic corpus generators for the desk-scale experiments: a copy task
//! whose second half repeats its first half, duplicate families with heavy
//! within-family lexical overlap, and a topic-disjoint domain-shift pair.
//!
//! All output is word-mode text: whitespace-separated tokens, blank lines
//! between documents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separator between the prefix and its repetition in the copy task.
pub const COPY_SEP: &str = "=";

/// Documents of the form `p_1 .. p_n = p_1 .. p_n` with a random prefix.
/// Every token after the separator (except the first, whose source has no
/// context row) can be predicted by pointing at its earlier occurrence.
pub fn gen_copy(n_docs: usize, prefix_len: usize, vocab: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..n_docs {
        let prefix: Vec<String> =
            (0..prefix_len).map(|_| format!("w{:02}", rng.gen_range(0..vocab))).collect();
        out.push_str(&prefix.join(" "));
        out.push(' ');
        out.push_str(COPY_SEP);
        out.push(' ');
        out.push_str(&prefix.join(" "));
        out.push_str("\n\n");
    }
    out
}

/// Token length of one copy-task document.
pub fn copy_doc_len(prefix_len: usize) -> usize {
    2 * prefix_len + 1
}

/// 0-based positions within a copy document whose targets repeat an earlier
/// in-document pair: the separator consumes one position, and the first
/// repeated token's source has no context row.
pub fn copy_positions(prefix_len: usize) -> std::ops::Range<usize> {
    (prefix_len + 2)..(2 * prefix_len + 1)
}

/// Families of near-duplicate documents. Each family draws from its own
/// disjoint word pool, so cross-family lexical overlap is zero; members of a
/// family share a base sequence with a few seeded substitutions.
pub fn gen_dup_families(
    families: usize,
    members: usize,
    words_per_doc: usize,
    pool: usize,
    seed: u64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for f in 0..families {
        let base: Vec<usize> = (0..words_per_doc).map(|_| rng.gen_range(0..pool)).collect();
        for _ in 0..members {
            let mut words = base.clone();
            // perturb ~10% of the positions inside the family pool
            for _ in 0..(words_per_doc / 10).max(1) {
                let at = rng.gen_range(0..words_per_doc);
                words[at] = rng.gen_range(0..pool);
            }
            let doc: Vec<String> = words.iter().map(|w| format!("f{}w{}", f, w)).collect();
            out.push_str(&doc.join(" "));
            out.push_str("\n\n");
        }
    }
    out
}

/// Two corpora over disjoint topic vocabularies, for domain-shift runs.
/// Returns `(domain_a, domain_b)`.
pub fn gen_domain_shift(
    docs_per_domain: usize,
    words_per_doc: usize,
    vocab: usize,
    seed: u64,
) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = |prefix: &str, rng: &mut ChaCha8Rng| {
        let mut out = String::new();
        for _ in 0..docs_per_domain {
            let doc: Vec<String> = (0..words_per_doc)
                .map(|_| format!("{}{}", prefix, rng.gen_range(0..vocab)))
                .collect();
            out.push_str(&doc.join(" "));
            out.push_str("\n\n");
        }
        out
    };
    let a = gen("alpha", &mut rng);
    let b = gen("beta", &mut rng);
    (a, b)
}
