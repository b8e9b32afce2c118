//! Corpus ingestion: tokenization, vocabulary, block splitting and
//! document-frequency statistics.
//!
//! # Corpus file layout
//!
//! ```text
//! "ROMCORPUS v1\n"
//! u32 vocab_len
//!   vocab_len × (u32 byte_len, utf-8 bytes)          -- token strings in id order
//! u32 n_blocks
//!   n_blocks × (u32 block_id, u32 doc_id,
//!               u32 title_len, title_len × u32,
//!               u32 body_len,  body_len × u32,
//!               u32 n_sentences, n_sentences × (u32 start, u32 end))
//! u32 doc_freq_len (== vocab_len)
//!   doc_freq_len × u32
//! ```
//!
//! All integers are little-endian.

mod ict;
mod qa;

pub use ict::{make_ict_example, make_phrase_ict_example, sample_proportional, span_scores, IctExample};
pub use qa::{load_qa_dataset, locate_answer_spans, parse_qa_lines, subsample_supervision, QaExample, QaLoad};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{truncated, Result, RomError};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const N_SPECIAL: u32 = 4;

const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const CORPUS_MAGIC: &str = "ROMCORPUS v1";

/// Bijective token ↔ id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary assigning ids 4, 5, ... to `tokens` in order.
    /// Duplicates and tokens colliding with special names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for s in SPECIAL_TOKENS {
            v.push(s.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.token_to_id.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, tok: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(tok.clone(), id);
        self.id_to_token.push(tok);
    }

    /// Keeps the `cap - 4` most frequent tokens; ties broken lexicographically.
    pub fn from_counts(counts: &HashMap<String, u64>, cap: usize) -> Self {
        let mut items: Vec<(&String, &u64)> = counts.iter().collect();
        items.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let keep = cap.saturating_sub(N_SPECIAL as usize);
        Vocab::from_tokens(items.into_iter().take(keep).map(|(t, _)| t.clone()))
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn is_special(id: u32) -> bool {
        id < N_SPECIAL
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Lowercases and splits on whitespace; every non-alphanumeric,
/// non-whitespace character becomes its own token.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    word_tokens(text).iter().map(|t| vocab.id(t)).collect()
}

/// Splits after '.', '!' or '?' when followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    let s = text[start..end].trim();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    start = end;
                }
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub title: String,
    pub text: String,
}

/// Reads the JSON-lines document format `{"id", "title", "text"}`.
pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| RomError::MalformedLine {
            line: i + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub block_id: u32,
    pub doc_id: u32,
    pub title: Vec<u32>,
    pub body: Vec<u32>,
    /// Half-open `[start, end)` token ranges partitioning `body`.
    pub sentence_boundaries: Vec<(u32, u32)>,
}

impl Block {
    pub fn sentence(&self, i: usize) -> &[u32] {
        let (s, e) = self.sentence_boundaries[i];
        &self.body[s as usize..e as usize]
    }

    pub fn n_sentences(&self) -> usize {
        self.sentence_boundaries.len()
    }

    pub fn term_frequency(&self, token: u32) -> usize {
        self.body.iter().filter(|&&t| t == token).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub blocks: Vec<Block>,
    pub vocab: Vocab,
    /// Indexed by token id: number of blocks whose body contains the token.
    pub doc_freq: Vec<u32>,
}

impl Corpus {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, id: u32) -> Option<&Block> {
        self.blocks.get(id as usize)
    }

    pub fn block_text(&self, id: u32) -> String {
        self.block(id)
            .map(|b| detokenize(&b.body, &self.vocab))
            .unwrap_or_default()
    }

    /// Map from (title ids, body ids) to block id, for resolving inline passages.
    pub fn content_lookup(&self) -> HashMap<(&[u32], &[u32]), u32> {
        self.blocks
            .iter()
            .map(|b| ((b.title.as_slice(), b.body.as_slice()), b.block_id))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CORPUS_MAGIC.as_bytes())?;
        w.write_all(b"\n")?;
        w.write_u32::<LittleEndian>(self.vocab.len() as u32)?;
        for tok in self.vocab.tokens() {
            w.write_u32::<LittleEndian>(tok.len() as u32)?;
            w.write_all(tok.as_bytes())?;
        }
        w.write_u32::<LittleEndian>(self.blocks.len() as u32)?;
        for b in &self.blocks {
            w.write_u32::<LittleEndian>(b.block_id)?;
            w.write_u32::<LittleEndian>(b.doc_id)?;
            write_ids(w, &b.title)?;
            write_ids(w, &b.body)?;
            w.write_u32::<LittleEndian>(b.sentence_boundaries.len() as u32)?;
            for &(s, e) in &b.sentence_boundaries {
                w.write_u32::<LittleEndian>(s)?;
                w.write_u32::<LittleEndian>(e)?;
            }
        }
        write_ids(w, &self.doc_freq)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RomError::MissingPrerequisite(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = vec![0u8; CORPUS_MAGIC.len() + 1];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic[..CORPUS_MAGIC.len()] != CORPUS_MAGIC.as_bytes() || magic[CORPUS_MAGIC.len()] != b'\n' {
            return Err(RomError::IncompatibleCorpus("bad magic".into()));
        }
        let n_vocab = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut tokens = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(truncated)?;
            tokens.push(
                String::from_utf8(buf).map_err(|_| RomError::IncompatibleCorpus("non utf-8 token".into()))?,
            );
        }
        if tokens.len() < N_SPECIAL as usize
            || tokens[..N_SPECIAL as usize].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(RomError::IncompatibleCorpus("special tokens missing".into()));
        }
        let vocab = Vocab::from_tokens(tokens.into_iter().skip(N_SPECIAL as usize));
        if vocab.len() != n_vocab {
            return Err(RomError::IncompatibleCorpus("duplicate vocab entries".into()));
        }
        let n_blocks = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let block_id = r.read_u32::<LittleEndian>().map_err(truncated)?;
            let doc_id = r.read_u32::<LittleEndian>().map_err(truncated)?;
            let title = read_ids(r)?;
            let body = read_ids(r)?;
            let n_sent = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut sentence_boundaries = Vec::with_capacity(n_sent);
            for _ in 0..n_sent {
                let s = r.read_u32::<LittleEndian>().map_err(truncated)?;
                let e = r.read_u32::<LittleEndian>().map_err(truncated)?;
                sentence_boundaries.push((s, e));
            }
            blocks.push(Block {
                block_id,
                doc_id,
                title,
                body,
                sentence_boundaries,
            });
        }
        let doc_freq = read_ids(r)?;
        if doc_freq.len() != vocab.len() {
            return Err(RomError::IncompatibleCorpus("doc_freq length differs from vocab".into()));
        }
        Ok(Corpus {
            blocks,
            vocab,
            doc_freq,
        })
    }
}

fn write_ids<W: Write>(w: &mut W, ids: &[u32]) -> Result<()> {
    w.write_u32::<LittleEndian>(ids.len() as u32)?;
    for &i in ids {
        w.write_u32::<LittleEndian>(i)?;
    }
    Ok(())
}

fn read_ids<R: Read>(r: &mut R) -> Result<Vec<u32>> {
    let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut out = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut out).map_err(truncated)?;
    Ok(out)
}

/// Greedy packing of whole sentences into blocks of at most `block_size`
/// tokens. A sentence longer than `block_size` is hard-split.
/// Returns per block the list of sentence token runs.
fn pack_sentences(sentences: Vec<Vec<String>>, block_size: usize) -> Vec<Vec<Vec<String>>> {
    let mut blocks: Vec<Vec<Vec<String>>> = Vec::new();
    let mut cur: Vec<Vec<String>> = Vec::new();
    let mut cur_len = 0usize;
    for sent in sentences {
        if sent.is_empty() {
            continue;
        }
        let pieces: Vec<Vec<String>> = if sent.len() > block_size {
            sent.chunks(block_size).map(|c| c.to_vec()).collect()
        } else {
            vec![sent]
        };
        for piece in pieces {
            if cur_len + piece.len() > block_size && !cur.is_empty() {
                blocks.push(std::mem::take(&mut cur));
                cur_len = 0;
            }
            cur_len += piece.len();
            cur.push(piece);
        }
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    blocks
}

pub fn build_corpus(documents: &[Document], block_size: usize, vocab_cap: usize) -> Result<Corpus> {
    if documents.is_empty() {
        return Err(RomError::EmptyCorpus);
    }
    if block_size == 0 {
        return Err(RomError::invalid("block_size must be positive"));
    }
    if vocab_cap < N_SPECIAL as usize {
        return Err(RomError::invalid("vocab_cap must be at least 4"));
    }

    let tokenized: Vec<(Vec<String>, Vec<Vec<String>>)> = crate::parallel::map(documents, |_, d| {
        let title = word_tokens(&d.title);
        let sents = split_sentences(&d.text).into_iter().map(word_tokens).collect();
        (title, sents)
    });

    let mut counts: HashMap<String, u64> = HashMap::new();
    for (title, sents) in &tokenized {
        for t in title.iter().chain(sents.iter().flatten()) {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    let vocab = Vocab::from_counts(&counts, vocab_cap);

    let mut blocks = Vec::new();
    for (doc_idx, (title, sents)) in tokenized.into_iter().enumerate() {
        let title_ids: Vec<u32> = title.iter().map(|t| vocab.id(t)).collect();
        for packed in pack_sentences(sents, block_size) {
            let mut body = Vec::new();
            let mut bounds = Vec::new();
            for s in packed {
                let start = body.len() as u32;
                body.extend(s.iter().map(|t| vocab.id(t)));
                bounds.push((start, body.len() as u32));
            }
            blocks.push(Block {
                block_id: blocks.len() as u32,
                doc_id: doc_idx as u32,
                title: title_ids.clone(),
                body,
                sentence_boundaries: bounds,
            });
        }
    }
    if blocks.is_empty() {
        return Err(RomError::EmptyCorpus);
    }

    let mut doc_freq = vec![0u32; vocab.len()];
    let mut seen = vec![u32::MAX; vocab.len()];
    for b in &blocks {
        for &t in &b.body {
            if seen[t as usize] != b.block_id {
                seen[t as usize] = b.block_id;
                doc_freq[t as usize] += 1;
            }
        }
    }

    Ok(Corpus {
        blocks,
        vocab,
        doc_freq,
    })
}

/// `tf(w, block) · ln(N / (1 + df(w)))`, clamped at zero. Special tokens score 0.
pub fn tfidf(token_id: u32, block: &Block, corpus: &Corpus) -> f64 {
    if Vocab::is_special(token_id) {
        return 0.0;
    }
    let tf = block.term_frequency(token_id);
    if tf == 0 {
        return 0.0;
    }
    let df = corpus.doc_freq.get(token_id as usize).copied().unwrap_or(0) as f64;
    let idf = (corpus.n_blocks() as f64 / (1.0 + df)).ln();
    (tf as f64 * idf).max(0.0)
}
