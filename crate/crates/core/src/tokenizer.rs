//! Caseless WordPiece tokenization with tag propagation.
//!
//! Words are split greedily into the longest matching vocabulary prefix,
//! followed by continuation pieces carrying the `##` marker. A word-level tag
//! is repeated over every piece of its word so the piece and tag sequences
//! stay the same length.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const CONTINUATION_MARKER: &str = "##";
pub const DEFAULT_UNK: &str = "[UNK]";
/// Words longer than this (in chars) are mapped straight to the unknown piece.
pub const MAX_WORD_CHARS: usize = 100;

pub type PieceId = u32;
pub type TagId = usize;

#[inline]
pub fn is_continuation(piece: &str) -> bool {
    piece.starts_with(CONTINUATION_MARKER)
}

/// Punctuation for splitting purposes: ASCII punctuation and any other
/// character that is neither alphanumeric, whitespace nor a control code.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lower-case, NFC-normalize, split every punctuation character into its own
/// word and collapse whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let mut words = Vec::new();
    let mut current = String::new();
    for c in lowered.chars() {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<String>,
    piece_to_id: HashMap<String, PieceId>,
    unk_piece: String,
    unk_id: PieceId,
}

impl Vocabulary {
    pub fn new(pieces: Vec<String>, unk_piece: &str) -> Result<Self> {
        let mut piece_to_id = HashMap::with_capacity(pieces.len());
        for (i, piece) in pieces.iter().enumerate() {
            if piece.is_empty() {
                return Err(Error::invalid(format!("empty piece at line {}", i + 1)));
            }
            if piece == CONTINUATION_MARKER {
                return Err(Error::invalid(format!(
                    "bare continuation marker at line {}",
                    i + 1
                )));
            }
            if piece.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "piece {piece:?} at line {} contains whitespace",
                    i + 1
                )));
            }
            let id = PieceId::try_from(i)
                .map_err(|_| Error::invalid("vocabulary too large for 32-bit ids"))?;
            if piece_to_id.insert(piece.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate piece {piece:?}")));
            }
        }
        let unk_id = *piece_to_id
            .get(unk_piece)
            .ok_or_else(|| Error::invalid(format!("unknown piece {unk_piece:?} not in vocabulary")))?;
        Ok(Self {
            pieces,
            piece_to_id,
            unk_piece: unk_piece.to_string(),
            unk_id,
        })
    }

    /// One piece per line, id = line index.
    pub fn from_reader<R: Read>(reader: R, unk_piece: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            pieces.push(line.trim_end_matches('\r').to_string());
        }
        Self::new(pieces, unk_piece)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?, DEFAULT_UNK)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<PieceId> {
        self.piece_to_id.get(piece).copied()
    }

    pub fn piece(&self, id: PieceId) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn unk_piece(&self) -> &str {
        &self.unk_piece
    }

    pub fn unk_id(&self) -> PieceId {
        self.unk_id
    }

    /// SHA-256 over the file representation, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Ids for already tokenized pieces; pieces missing from the inventory map
    /// to the unknown id.
    pub fn ids_for(&self, pieces: &[String]) -> Vec<PieceId> {
        pieces
            .iter()
            .map(|p| self.id(p).unwrap_or(self.unk_id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    labels: Vec<String>,
    outside: TagId,
}

impl Default for TagScheme {
    fn default() -> Self {
        Self {
            labels: vec!["0".to_string(), "NER".to_string()],
            outside: 0,
        }
    }
}

impl TagScheme {
    pub fn new(labels: Vec<String>, outside_label: &str) -> Result<Self> {
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::invalid(format!("duplicate tag label {l:?}")));
            }
        }
        let outside = labels
            .iter()
            .position(|l| l == outside_label)
            .ok_or_else(|| Error::invalid(format!("outside label {outside_label:?} not in scheme")))?;
        Ok(Self { labels, outside })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn outside(&self) -> TagId {
        self.outside
    }

    /// The first non-outside tag; the topic tag in the default scheme.
    pub fn topic(&self) -> TagId {
        (0..self.labels.len())
            .find(|&t| t != self.outside)
            .unwrap_or(self.outside)
    }

    pub fn is_outside(&self, tag: TagId) -> bool {
        tag == self.outside
    }

    pub fn label(&self, tag: TagId) -> Option<&str> {
        self.labels.get(tag).map(String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<TagId> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn check(&self, tag: TagId) -> Result<()> {
        if tag < self.labels.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "tag id {tag} out of range for {} labels",
                self.labels.len()
            )))
        }
    }
}

/// Pieces of a word sequence without tags; the input to inference.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PieceSequence {
    pub pieces: Vec<String>,
    pub piece_ids: Vec<PieceId>,
    pub word_boundaries: Vec<usize>,
}

impl PieceSequence {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// One record of the parallel corpus: pieces with their propagated tags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaggedSequence {
    pub pieces: Vec<String>,
    pub piece_ids: Vec<PieceId>,
    pub tags: Vec<TagId>,
    pub word_boundaries: Vec<usize>,
}

impl TaggedSequence {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Builds a record from pieces and tags, deriving ids and word
    /// boundaries. Used when reading corpus files back.
    pub fn from_pieces(pieces: Vec<String>, tags: Vec<TagId>, vocab: &Vocabulary) -> Result<Self> {
        if pieces.len() != tags.len() {
            return Err(Error::invalid(format!(
                "{} pieces but {} tags",
                pieces.len(),
                tags.len()
            )));
        }
        if pieces.first().is_some_and(|p| is_continuation(p)) {
            return Err(Error::invalid("record starts with a continuation piece"));
        }
        let word_boundaries = root_positions(&pieces);
        let piece_ids = vocab.ids_for(&pieces);
        Ok(Self {
            pieces,
            piece_ids,
            tags,
            word_boundaries,
        })
    }

    /// Slice `[start, end)` of pieces as a standalone record. `start` must be a
    /// word boundary.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            pieces: self.pieces[start..end].to_vec(),
            piece_ids: self.piece_ids[start..end].to_vec(),
            tags: self.tags[start..end].to_vec(),
            word_boundaries: self
                .word_boundaries
                .iter()
                .filter(|&&b| b >= start && b < end)
                .map(|&b| b - start)
                .collect(),
        }
    }

    /// Word-level tags, read off each word's root piece.
    pub fn word_tags(&self) -> Vec<TagId> {
        self.word_boundaries.iter().map(|&b| self.tags[b]).collect()
    }
}

/// Indices of root (non-continuation) pieces.
pub fn root_positions(pieces: &[String]) -> Vec<usize> {
    pieces
        .iter()
        .enumerate()
        .filter(|(_, p)| !is_continuation(p))
        .map(|(i, _)| i)
        .collect()
}

fn check_word(word: &str) -> Result<()> {
    if word.is_empty() {
        return Err(Error::invalid("empty word"));
    }
    if word.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("word {word:?} contains whitespace")));
    }
    if word.chars().any(|c| c.is_ascii_uppercase()) {
        return Err(Error::invalid(format!("word {word:?} is not lower-cased")));
    }
    Ok(())
}

/// Greedy longest-match-first split of one lower-cased word.
///
/// Falls back to the single unknown piece when any position has no matching
/// vocabulary entry or the word exceeds [`MAX_WORD_CHARS`].
pub fn tokenize_word(word: &str, vocab: &Vocabulary) -> Result<Vec<String>> {
    check_word(word)?;
    let unk = || vec![vocab.unk_piece().to_string()];
    // char boundary offsets, including the end
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    if bounds.len() - 1 > MAX_WORD_CHARS {
        return Ok(unk());
    }

    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + 2);
    while start < bounds.len() - 1 {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            candidate.clear();
            let body = &word[bounds[start]..bounds[end]];
            if start > 0 {
                candidate.push_str(CONTINUATION_MARKER);
            } else if is_continuation(body) {
                continue;
            }
            candidate.push_str(body);
            if vocab.id(&candidate).is_some() {
                found = Some(end);
                break;
            }
        }
        match found {
            Some(end) => {
                pieces.push(candidate.clone());
                start = end;
            }
            None => return Ok(unk()),
        }
    }
    Ok(pieces)
}

/// Tokenizes words without tags.
pub fn tokenize_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Result<PieceSequence> {
    let mut out = PieceSequence::default();
    for word in words {
        out.word_boundaries.push(out.pieces.len());
        for piece in tokenize_word(word.as_ref(), vocab)? {
            out.piece_ids.push(vocab.id(&piece).unwrap_or(vocab.unk_id()));
            out.pieces.push(piece);
        }
    }
    Ok(out)
}

/// Tokenizes words and repeats each word's tag over all of its pieces.
pub fn tokenize_tagged<S: AsRef<str>>(
    words: &[S],
    word_tags: &[TagId],
    vocab: &Vocabulary,
    scheme: &TagScheme,
) -> Result<TaggedSequence> {
    if words.len() != word_tags.len() {
        return Err(Error::invalid(format!(
            "{} words but {} tags",
            words.len(),
            word_tags.len()
        )));
    }
    for &t in word_tags {
        scheme.check(t)?;
    }
    let seq = tokenize_words(words, vocab)?;
    let mut tags = Vec::with_capacity(seq.len());
    for (w, &tag) in word_tags.iter().enumerate() {
        let end = seq.word_boundaries.get(w + 1).copied().unwrap_or(seq.len());
        tags.extend(std::iter::repeat_n(tag, end - seq.word_boundaries[w]));
    }
    Ok(TaggedSequence {
        pieces: seq.pieces,
        piece_ids: seq.piece_ids,
        tags,
        word_boundaries: seq.word_boundaries,
    })
}

/// Joins continuation pieces onto their root, stripping markers.
pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> Result<Vec<String>> {
    let mut words: Vec<String> = Vec::new();
    for piece in pieces {
        let piece = piece.as_ref();
        match piece.strip_prefix(CONTINUATION_MARKER) {
            Some(rest) => match words.last_mut() {
                Some(w) => w.push_str(rest),
                None => {
                    return Err(Error::invalid(format!(
                        "sequence starts with continuation piece {piece:?}"
                    )))
                }
            },
            None => words.push(piece.to_string()),
        }
    }
    Ok(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(pieces: &[&str]) -> Vocabulary {
        let mut all = vec![DEFAULT_UNK.to_string()];
        all.extend(pieces.iter().map(|s| s.to_string()));
        Vocabulary::new(all, DEFAULT_UNK).unwrap()
    }

    #[test]
    fn harassment_splits_into_three_pieces() {
        let v = vocab(&["har", "##ass", "##ment", "the"]);
        assert_eq!(
            tokenize_word("harassment", &v).unwrap(),
            ["har", "##ass", "##ment"]
        );
        assert_eq!(tokenize_word("the", &v).unwrap(), ["the"]);
    }

    #[test]
    fn unmatched_word_is_unknown() {
        let v = vocab(&["the"]);
        assert_eq!(tokenize_word("zzqx", &v).unwrap(), [DEFAULT_UNK]);
        // a matching prefix but no continuation still collapses to unk
        assert_eq!(tokenize_word("thez", &v).unwrap(), [DEFAULT_UNK]);
    }

    #[test]
    fn longest_prefix_wins() {
        let v = vocab(&["h", "ha", "har", "##a", "##ass", "##ment", "##m", "##ent"]);
        assert_eq!(
            tokenize_word("harassment", &v).unwrap(),
            ["har", "##ass", "##ment"]
        );
    }

    #[test]
    fn invalid_words_are_rejected() {
        let v = vocab(&["the"]);
        assert!(matches!(tokenize_word("", &v), Err(Error::InvalidInput(_))));
        assert!(tokenize_word("a b", &v).is_err());
        assert!(tokenize_word("The", &v).is_err());
    }

    #[test]
    fn overlong_word_is_unknown() {
        let v = vocab(&["a", "##a"]);
        assert_eq!(tokenize_word(&"a".repeat(100), &v).unwrap().len(), 100);
        assert_eq!(tokenize_word(&"a".repeat(101), &v).unwrap(), [DEFAULT_UNK]);
    }

    #[test]
    fn tags_repeat_over_pieces() {
        let v = vocab(&["sexual", "har", "##ass", "##ment", "movement"]);
        let s = TagScheme::default();
        let seq = tokenize_tagged(&["sexual", "harassment"], &[1, 1], &v, &s).unwrap();
        assert_eq!(seq.pieces, ["sexual", "har", "##ass", "##ment"]);
        assert_eq!(seq.tags, [1, 1, 1, 1]);
        assert_eq!(seq.word_boundaries, [0, 1]);

        let seq = tokenize_tagged(&["movement"], &[0], &v, &s).unwrap();
        assert_eq!(seq.pieces, ["movement"]);
        assert_eq!(seq.tags, [0]);
    }

    #[test]
    fn unknown_word_keeps_its_single_tag() {
        let v = vocab(&["a"]);
        let seq = tokenize_tagged(&["a", "qqq"], &[0, 1], &v, &TagScheme::default()).unwrap();
        assert_eq!(seq.pieces, ["a", DEFAULT_UNK]);
        assert_eq!(seq.tags, [0, 1]);
    }

    #[test]
    fn tag_out_of_range_is_rejected() {
        let v = vocab(&["a"]);
        let err = tokenize_tagged(&["a"], &[2], &v, &TagScheme::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        assert!(tokenize_tagged(&["a"], &[0, 0], &v, &TagScheme::default()).is_err());
    }

    #[test]
    fn detokenize_cases() {
        assert_eq!(detokenize(&["har", "##ass", "##ment"]).unwrap(), ["harassment"]);
        assert_eq!(
            detokenize(&["me", "too", "movement"]).unwrap(),
            ["me", "too", "movement"]
        );
        assert_eq!(
            detokenize(&["new", "york", ".", "##s"]).unwrap(),
            ["new", "york", ".s"]
        );
        assert!(detokenize(&["##s"]).is_err());
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into(), "[UNK]".into()], "[UNK]").is_err());
        assert!(Vocabulary::new(vec!["a".into()], "[UNK]").is_err());
        assert!(Vocabulary::new(vec!["[UNK]".into(), "".into()], "[UNK]").is_err());
        assert!(Vocabulary::new(vec!["[UNK]".into(), "##".into()], "[UNK]").is_err());
        let v = Vocabulary::from_reader("[UNK]\nthe\n##s\n".as_bytes(), "[UNK]").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("##s"), Some(2));
        assert_eq!(v.piece(1), Some("the"));
    }

    #[test]
    fn scheme_defaults() {
        let s = TagScheme::default();
        assert_eq!(s.labels(), ["0", "NER"]);
        assert_eq!(s.outside(), 0);
        assert_eq!(s.topic(), 1);
        assert!(TagScheme::new(vec!["0".into(), "0".into()], "0").is_err());
        assert!(TagScheme::new(vec!["A".into()], "0").is_err());
    }

    #[test]
    fn normalization_splits_punctuation_and_lowercases() {
        assert_eq!(
            normalize("  Related NAMES, is\ta  Movement."),
            ["related", "names", ",", "is", "a", "movement", "."]
        );
        assert_eq!(normalize("aam aadmi party's"), ["aam", "aadmi", "party", "'", "s"]);
        assert!(normalize(" \n ").is_empty());
    }

    // Vocabulary of single letters and their continuations covers any word
    // over the alphabet; add a few multi-char pieces so greedy matching has
    // real choices to make.
    fn alphabet_vocab() -> Vocabulary {
        let mut pieces = vec![DEFAULT_UNK.to_string()];
        for c in 'a'..='f' {
            pieces.push(c.to_string());
            pieces.push(format!("##{c}"));
        }
        for p in ["ab", "abc", "##cd", "##def", "fa", "##ba"] {
            pieces.push(p.to_string());
        }
        Vocabulary::new(pieces, DEFAULT_UNK).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_on_covered_words(word in "[a-f]{1,30}") {
            let v = alphabet_vocab();
            let pieces = tokenize_word(&word, &v).unwrap();
            prop_assert!(!is_continuation(&pieces[0]));
            prop_assert!(pieces[1..].iter().all(|p| is_continuation(p)));
            prop_assert_eq!(detokenize(&pieces).unwrap(), vec![word.clone()]);
            prop_assert_eq!(tokenize_word(&word, &v).unwrap(), pieces);
        }

        #[test]
        fn tags_are_conserved(words in prop::collection::vec("[a-f]{1,8}", 1..20), seed in any::<u64>()) {
            let v = alphabet_vocab();
            let tags: Vec<usize> = (0..words.len()).map(|i| ((seed >> (i % 64)) & 1) as usize).collect();
            let seq = tokenize_tagged(&words, &tags, &v, &TagScheme::default()).unwrap();
            prop_assert_eq!(seq.pieces.len(), seq.tags.len());
            prop_assert_eq!(seq.pieces.len(), seq.piece_ids.len());
            prop_assert!(seq.pieces.len() >= words.len());
            prop_assert_eq!(seq.word_tags(), tags.clone());
            for (i, p) in seq.pieces.iter().enumerate() {
                let w = seq.word_boundaries.partition_point(|&b| b <= i) - 1;
                prop_assert_eq!(seq.tags[i], tags[w]);
                prop_assert_eq!(seq.word_boundaries.contains(&i), !is_continuation(p));
            }
            prop_assert_eq!(detokenize(&seq.pieces).unwrap(), words);
        }
    }
}
