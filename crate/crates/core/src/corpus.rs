//! Corpus reduction and parallel-corpus emission.
//!
//! Documents are embedded with a feature-hashed bag of words, near duplicates
//! are dropped by cosine similarity, a greedy set cover keeps the documents
//! needed to cover every word n-gram, and the survivors are weakly labeled,
//! tokenized and chunked into records.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gazetteer::{weak_label, Gazetteer};
use crate::tokenizer::{normalize, tokenize_tagged, TagScheme, TaggedSequence, Vocabulary};

pub const DEFAULT_EMBED_DIM: usize = 1024;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;
pub const DEFAULT_NGRAM_RANGE: (usize, usize) = (2, 5);

/// Absorbs rounding when a vector is compared with itself at threshold 1.0.
const SIMILARITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub words: Vec<String>,
    pub vector: Vec<f64>,
}

impl Document {
    /// Normalizes `text` and embeds it with `dim` hash buckets.
    pub fn new(id: impl Into<String>, text: impl Into<String>, dim: usize) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        let words = normalize(&text);
        let vector = embed_words(&words, dim)
            .map_err(|e| Error::invalid(format!("document {id:?}: {e}")))?;
        Ok(Self {
            id,
            text,
            words,
            vector,
        })
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Signed hashed term-frequency vector, L2 normalized. The top hash bit
/// picks the sign so collisions cancel in expectation.
pub fn embed_words<S: AsRef<str>>(words: &[S], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    if words.is_empty() {
        return Err(Error::invalid("cannot embed an empty document"));
    }
    let mut v = vec![0.0; dim];
    for w in words {
        let h = fnv1a(w.as_ref().as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn embed_document(doc: &Document, dim: usize) -> Result<Vec<f64>> {
    embed_words(&doc.words, dim)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Keeps each document unless it is at least `threshold`-similar to an
/// already kept one. Order is preserved, so the earliest member of a
/// near-duplicate group survives.
pub fn dedup(docs: Vec<Document>, threshold: f64) -> Result<Vec<Document>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "dedup threshold {threshold} outside [0, 1]"
        )));
    }
    let mut kept: Vec<Document> = Vec::with_capacity(docs.len());
    for doc in docs {
        let duplicate = kept
            .iter()
            .any(|k| cosine(&k.vector, &doc.vector) + SIMILARITY_SLACK >= threshold);
        if !duplicate {
            kept.push(doc);
        }
    }
    Ok(kept)
}

/// All word n-grams with `min <= n <= max`, space joined.
pub fn ngrams<S: AsRef<str>>(words: &[S], range: (usize, usize)) -> HashSet<String> {
    let (min, max) = range;
    let mut out = HashSet::new();
    for n in min.max(1)..=max {
        for window in words.windows(n) {
            out.insert(
                window
                    .iter()
                    .map(AsRef::as_ref)
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
    }
    out
}

/// Greedy set cover over word n-grams: repeatedly take the document adding
/// the most uncovered n-grams (ties go to the earlier document) until the
/// corpus n-gram set is covered. Selected documents keep their input order.
///
/// A corpus without any n-gram in range returns its first document.
pub fn select_min_cover(docs: Vec<Document>, ngram_range: (usize, usize)) -> Result<Vec<Document>> {
    let (min, max) = ngram_range;
    if min < 1 || max < min {
        return Err(Error::invalid(format!(
            "ngram range ({min}, {max}) must satisfy 1 <= min <= max"
        )));
    }
    if docs.is_empty() {
        return Ok(docs);
    }
    let sets: Vec<HashSet<String>> = docs.iter().map(|d| ngrams(&d.words, ngram_range)).collect();
    let mut uncovered: HashSet<&str> = sets.iter().flatten().map(String::as_str).collect();
    let mut selected = vec![false; docs.len()];
    if uncovered.is_empty() {
        selected[0] = true;
    }
    while !uncovered.is_empty() {
        let mut best = None;
        let mut best_gain = 0;
        for (i, set) in sets.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let gain = set.iter().filter(|g| uncovered.contains(g.as_str())).count();
            if gain > best_gain {
                best_gain = gain;
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        selected[i] = true;
        for g in &sets[i] {
            uncovered.remove(g.as_str());
        }
    }
    Ok(docs
        .into_iter()
        .zip(selected)
        .filter_map(|(d, s)| s.then_some(d))
        .collect())
}

/// Splits a record into chunks of at most `seq_len` pieces at word
/// boundaries. Returns the chunks and the number of words dropped because a
/// single word alone exceeds `seq_len`.
pub fn chunk(seq: &TaggedSequence, seq_len: usize) -> (Vec<TaggedSequence>, usize) {
    let mut chunks = Vec::new();
    let mut skipped = 0;
    let mut start = 0;
    let n_words = seq.word_boundaries.len();
    let word_end = |w: usize| seq.word_boundaries.get(w + 1).copied().unwrap_or(seq.len());
    let mut w = 0;
    while w < n_words {
        let (ws, we) = (seq.word_boundaries[w], word_end(w));
        if we - ws > seq_len {
            if ws > start {
                chunks.push(seq.slice(start, ws));
            }
            log::warn!("skipping a word of {} pieces (limit {seq_len})", we - ws);
            skipped += 1;
            start = we;
        } else if we - start > seq_len {
            chunks.push(seq.slice(start, ws));
            start = ws;
            continue;
        }
        w += 1;
    }
    if seq.len() > start {
        chunks.push(seq.slice(start, seq.len()));
    }
    (chunks, skipped)
}

/// Labels, tokenizes and chunks one document.
pub fn emit_document(
    doc: &Document,
    gaz: &Gazetteer,
    vocab: &Vocabulary,
    scheme: &TagScheme,
    seq_len: usize,
) -> Result<Vec<TaggedSequence>> {
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be positive"));
    }
    let tags = weak_label(&doc.words, gaz, scheme);
    let seq = tokenize_tagged(&doc.words, &tags, vocab, scheme)?;
    let (chunks, skipped) = chunk(&seq, seq_len);
    if skipped > 0 {
        log::warn!("document {:?}: {skipped} over-long word(s) skipped", doc.id);
    }
    Ok(chunks)
}

/// Lazily emits `(document id, records)` in document order.
pub fn emit_parallel_corpus<'a>(
    docs: &'a [Document],
    gaz: &'a Gazetteer,
    vocab: &'a Vocabulary,
    scheme: &'a TagScheme,
    seq_len: usize,
) -> impl Iterator<Item = Result<(&'a str, Vec<TaggedSequence>)>> + 'a {
    docs.iter().map(move |doc| {
        emit_document(doc, gaz, vocab, scheme, seq_len).map(|records| (doc.id.as_str(), records))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub n_records: usize,
    pub n_pieces: usize,
}

impl ManifestEntry {
    pub fn new(id: &str, records: &[TaggedSequence]) -> Self {
        Self {
            id: id.to_string(),
            n_records: records.len(),
            n_pieces: records.iter().map(TaggedSequence::len).sum(),
        }
    }
}

fn label(scheme: &TagScheme, tag: usize) -> Result<&str> {
    scheme
        .label(tag)
        .ok_or_else(|| Error::invalid(format!("tag id {tag} not in scheme")))
}

fn tag_id(scheme: &TagScheme, label: &str, line: usize) -> Result<usize> {
    scheme
        .id(label)
        .ok_or_else(|| Error::invalid(format!("line {line}: unknown tag {label:?}")))
}

/// `piece<TAB>tag` per line, blank line after each record.
pub fn write_conll<W: Write>(out: &mut W, records: &[TaggedSequence], scheme: &TagScheme) -> Result<()> {
    for rec in records {
        for (piece, &tag) in rec.pieces.iter().zip(&rec.tags) {
            writeln!(out, "{piece}\t{}", label(scheme, tag)?)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_conll<R: Read>(reader: R, vocab: &Vocabulary, scheme: &TagScheme) -> Result<Vec<TaggedSequence>> {
    let mut records = Vec::new();
    let (mut pieces, mut tags) = (Vec::new(), Vec::new());
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            if !pieces.is_empty() {
                records.push(TaggedSequence::from_pieces(
                    std::mem::take(&mut pieces),
                    std::mem::take(&mut tags),
                    vocab,
                )?);
            }
            continue;
        }
        let (piece, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("line {}: expected piece<TAB>tag", i + 1)))?;
        pieces.push(piece.to_string());
        tags.push(tag_id(scheme, tag, i + 1)?);
    }
    if !pieces.is_empty() {
        records.push(TaggedSequence::from_pieces(pieces, tags, vocab)?);
    }
    Ok(records)
}

/// Two lines per record: space-joined pieces, then space-joined tags.
pub fn write_two_line<W: Write>(out: &mut W, records: &[TaggedSequence], scheme: &TagScheme) -> Result<()> {
    for rec in records {
        writeln!(out, "{}", rec.pieces.join(" "))?;
        let tags = rec
            .tags
            .iter()
            .map(|&t| label(scheme, t))
            .collect::<Result<Vec<_>>>()?;
        writeln!(out, "{}", tags.join(" "))?;
    }
    Ok(())
}

pub fn read_two_line<R: Read>(reader: R, vocab: &Vocabulary, scheme: &TagScheme) -> Result<Vec<TaggedSequence>> {
    let lines: Vec<String> = BufReader::new(reader).lines().collect::<std::io::Result<_>>()?;
    let lines: Vec<&str> = lines
        .iter()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .collect();
    if !lines.len().is_multiple_of(2) {
        return Err(Error::invalid("two-line corpus has an odd number of lines"));
    }
    lines
        .chunks(2)
        .enumerate()
        .map(|(r, pair)| {
            let pieces = pair[0].split(' ').map(str::to_string).collect();
            let tags = pair[1]
                .split(' ')
                .map(|t| tag_id(scheme, t, 2 * r + 2))
                .collect::<Result<Vec<_>>>()?;
            TaggedSequence::from_pieces(pieces, tags, vocab)
        })
        .collect()
}
