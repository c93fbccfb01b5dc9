//! Corpus ingestion, tokenization and the vocabulary.
//!
//! Word mode splits documents on blank lines and tokens on whitespace; char
//! mode treats each file as one document of Unicode scalar values. Vocab ids
//! are assigned by training frequency (descending), ties broken
//! lexicographically, with `<unk>` and `<pad>` appended at the end.

use anyhow::{bail, Context, Result};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerMode {
    Char,
    Word,
}

impl TokenizerMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerMode::Char),
            "word" => Ok(TokenizerMode::Word),
            other => bail!("unknown tokenizer mode '{}'", other),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenizerMode::Char => "char",
            TokenizerMode::Word => "word",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    freqs: Vec<u64>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> u32 {
        self.ids[UNK_TOKEN]
    }

    pub fn pad_id(&self) -> u32 {
        self.ids[PAD_TOKEN]
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Training-corpus frequency of a token id (0 for specials).
    pub fn freq(&self, id: u32) -> u64 {
        self.freqs[id as usize]
    }

    pub fn freqs(&self) -> &[u64] {
        &self.freqs
    }

    fn from_counts(counts: HashMap<String, u64>) -> Vocab {
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = entries.iter().map(|(t, _)| t.clone()).collect();
        let mut freqs: Vec<u64> = entries.iter().map(|(_, f)| *f).collect();
        tokens.push(UNK_TOKEN.to_string());
        freqs.push(0);
        tokens.push(PAD_TOKEN.to_string());
        freqs.push(0);
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, ids, freqs }
    }

    /// TSV rows `token <TAB> id <TAB> train_frequency`, control characters
    /// escaped so char-mode tokens survive the format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            out.push_str(&escape(tok));
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\t');
            out.push_str(&self.freqs[i].to_string());
            out.push('\n');
        }
        fs::write(path, out).with_context(|| format!("write vocab {:?}", path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).with_context(|| format!("read vocab {:?}", path))?;
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split('\t');
            let (tok, id, freq) = match (parts.next(), parts.next(), parts.next()) {
                (Some(t), Some(i), Some(f)) => (t, i, f),
                _ => bail!("vocab line {} malformed", lineno + 1),
            };
            let id: usize = id.parse().context("vocab id")?;
            if id != tokens.len() {
                bail!("vocab ids not dense at line {}", lineno + 1);
            }
            tokens.push(unescape(tok)?);
            freqs.push(freq.parse().context("vocab frequency")?);
        }
        if tokens.is_empty() {
            bail!("empty vocab file {:?}", path);
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocab { tokens, ids, freqs })
    }
}

fn escape(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(tok: &str) -> Result<String> {
    let mut out = String::with_capacity(tok.len());
    let mut chars = tok.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            other => bail!("bad escape in vocab token: {:?}", other),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: u32,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.len()).sum()
    }
}

/// Raw token strings per document, before any vocabulary mapping.
fn raw_documents(path: &Path, mode: TokenizerMode) -> Result<Vec<Vec<String>>> {
    let mut files: Vec<std::path::PathBuf> = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).with_context(|| format!("read dir {:?}", path))? {
            let p = entry?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    if files.is_empty() {
        bail!("no corpus files under {:?}", path);
    }

    let mut docs = Vec::new();
    for file in &files {
        let text = fs::read_to_string(file).with_context(|| format!("read corpus {:?}", file))?;
        match mode {
            TokenizerMode::Char => {
                let toks: Vec<String> = text.chars().map(|c| c.to_string()).collect();
                if !toks.is_empty() {
                    docs.push(toks);
                }
            }
            TokenizerMode::Word => {
                let mut current: Vec<String> = Vec::new();
                for line in text.lines() {
                    if line.trim().is_empty() {
                        if !current.is_empty() {
                            docs.push(std::mem::take(&mut current));
                        }
                    } else {
                        current.extend(line.split_whitespace().map(|w| w.to_string()));
                    }
                }
                if !current.is_empty() {
                    docs.push(current);
                }
            }
        }
    }
    if docs.is_empty() {
        bail!("empty corpus {:?}", path);
    }
    Ok(docs)
}

/// Build the vocabulary from a training corpus and tokenize it.
pub fn ingest(path: &Path, mode: TokenizerMode) -> Result<(Vocab, Corpus)> {
    let raw = raw_documents(path, mode)?;
    let mut counts: HashMap<String, u64> = HashMap::new();
    for doc in &raw {
        for tok in doc {
            *counts.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    let vocab = Vocab::from_counts(counts);
    let corpus = map_documents(&vocab, raw);
    Ok((vocab, corpus))
}

/// Tokenize a corpus with an existing vocabulary; out-of-vocabulary tokens
/// map to `<unk>`.
pub fn tokenize_with(vocab: &Vocab, path: &Path, mode: TokenizerMode) -> Result<Corpus> {
    let raw = raw_documents(path, mode)?;
    Ok(map_documents(vocab, raw))
}

fn map_documents(vocab: &Vocab, raw: Vec<Vec<String>>) -> Corpus {
    let unk = vocab.unk_id();
    let docs = raw
        .into_iter()
        .enumerate()
        .map(|(i, toks)| Document {
            id: i as u32,
            tokens: toks.iter().map(|t| vocab.id_of(t).unwrap_or(unk)).collect(),
        })
        .collect();
    Corpus { docs }
}

/// Inverse of char-mode tokenization for one document.
pub fn detokenize_chars(vocab: &Vocab, tokens: &[u32]) -> String {
    tokens.iter().map(|&t| vocab.token_of(t)).collect()
}
