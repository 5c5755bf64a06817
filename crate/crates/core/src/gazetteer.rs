//! Title gazetteer: rule-based cleaning of a raw title list and greedy
//! leftmost-longest distant labeling of text.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use regex::Regex;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tokenizer::{normalize, TagId, TagScheme};

const DEFAULT_STOPLIST: &str = include_str!("../data/stoplist.txt");

/// Tokens mixing letters and digits, e.g. `x00` or `lga-775`.
pub const DEFAULT_TECHNICAL_PATTERN: &str =
    r"^[a-z0-9._/-]*(?:[a-z][a-z0-9._/-]*[0-9]|[0-9][a-z0-9._/-]*[a-z])[a-z0-9._/-]*$";

/// Reads a one-entry-per-line list, lower-casing and skipping blank lines.
pub fn read_word_list<R: Read>(reader: R) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for line in BufReader::new(reader).lines() {
        let line = collapse(&line?);
        if !line.is_empty() {
            out.insert(line);
        }
    }
    Ok(out)
}

pub fn default_stoplist() -> BTreeSet<String> {
    read_word_list(DEFAULT_STOPLIST.as_bytes()).expect("shipped stoplist is valid UTF-8")
}

fn collapse(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// A token is numeric when it starts and ends with a digit and every other
/// character is a digit or a `,` `.` `-` separator flanked by digits.
pub fn is_numeric_token(token: &str) -> bool {
    let chars: Vec<char> = token.chars().collect();
    if chars.is_empty() {
        return false;
    }
    chars.iter().enumerate().all(|(i, &c)| {
        c.is_ascii_digit()
            || (matches!(c, ',' | '.' | '-')
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_ascii_digit()
                && chars[i + 1].is_ascii_digit())
    })
}

#[derive(Debug, Clone)]
pub struct CleaningConfig {
    pub common_words: BTreeSet<String>,
    pub location_whitelist: BTreeSet<String>,
    pub technical_patterns: Vec<String>,
    /// Technical patterns only apply to tokens of at most this many chars.
    pub technical_max_chars: usize,
    pub keep_ngram_range: (usize, usize),
    /// Remove a title when any single token is numeric, not only when all are.
    pub remove_any_numeric_token: bool,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            common_words: default_stoplist(),
            location_whitelist: BTreeSet::new(),
            technical_patterns: vec![DEFAULT_TECHNICAL_PATTERN.to_string()],
            technical_max_chars: 8,
            keep_ngram_range: (1, 5),
            remove_any_numeric_token: false,
        }
    }
}

impl CleaningConfig {
    fn compile(&self) -> Result<Vec<Regex>> {
        let (min, max) = self.keep_ngram_range;
        if min < 1 || max < min {
            return Err(Error::invalid(format!(
                "keep_ngram_range ({min}, {max}) must satisfy 1 <= min <= max"
            )));
        }
        self.technical_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::invalid(format!("bad pattern {p:?}: {e}"))))
            .collect()
    }
}

/// Why a title was dropped; the first rule that fires wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Removal {
    CommonWord,
    Numeric,
    Technical,
    NgramRange,
    SingleWord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CleaningStats {
    pub input: usize,
    pub blank: usize,
    pub duplicate: usize,
    pub common_word: usize,
    pub numeric: usize,
    pub technical: usize,
    pub ngram_range: usize,
    pub single_word: usize,
    pub kept: usize,
}

impl CleaningStats {
    fn record(&mut self, removal: Removal) {
        match removal {
            Removal::CommonWord => self.common_word += 1,
            Removal::Numeric => self.numeric += 1,
            Removal::Technical => self.technical += 1,
            Removal::NgramRange => self.ngram_range += 1,
            Removal::SingleWord => self.single_word += 1,
        }
    }
}

fn classify(title: &str, config: &CleaningConfig, patterns: &[Regex]) -> Option<Removal> {
    let tokens: Vec<&str> = title.split(' ').collect();
    if config.common_words.contains(title) {
        return Some(Removal::CommonWord);
    }
    let numeric = tokens.iter().filter(|t| is_numeric_token(t)).count();
    if numeric == tokens.len() || (config.remove_any_numeric_token && numeric > 0) {
        return Some(Removal::Numeric);
    }
    let technical = tokens.iter().any(|t| {
        t.chars().count() <= config.technical_max_chars && patterns.iter().any(|p| p.is_match(t))
    });
    if technical {
        return Some(Removal::Technical);
    }
    let (min, max) = config.keep_ngram_range;
    if tokens.len() < min || tokens.len() > max {
        return Some(Removal::NgramRange);
    }
    if tokens.len() == 1 && !config.location_whitelist.contains(title) {
        return Some(Removal::SingleWord);
    }
    None
}

/// Applies the cleaning rules to raw titles. Survivors are lower-cased,
/// whitespace-collapsed and deduplicated.
pub fn clean_titles<S: AsRef<str>>(
    raw_titles: &[S],
    config: &CleaningConfig,
) -> Result<(Gazetteer, CleaningStats)> {
    let patterns = config.compile()?;
    let mut stats = CleaningStats {
        input: raw_titles.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for raw in raw_titles {
        let title = collapse(raw.as_ref());
        if title.is_empty() {
            stats.blank += 1;
            continue;
        }
        if !seen.insert(title.clone()) {
            stats.duplicate += 1;
            continue;
        }
        match classify(&title, config, &patterns) {
            Some(removal) => stats.record(removal),
            None => kept.push(title),
        }
    }
    stats.kept = kept.len();
    Ok((Gazetteer::from_titles(kept), stats))
}

#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    titles: BTreeSet<String>,
    /// first normalized word → candidate word sequences, longest first
    index: HashMap<String, Vec<Vec<String>>>,
    max_len: usize,
}

impl Gazetteer {
    /// Builds a gazetteer from already cleaned titles. Matching uses the same
    /// normalization as document text, so punctuation inside a title becomes
    /// its own word.
    pub fn from_titles<I, S>(titles: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let titles: BTreeSet<String> = titles
            .into_iter()
            .map(|t| collapse(t.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        let mut index: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        let mut max_len = 0;
        for title in &titles {
            let words = normalize(title);
            if words.is_empty() {
                continue;
            }
            max_len = max_len.max(words.len());
            index.entry(words[0].clone()).or_default().push(words);
        }
        for candidates in index.values_mut() {
            candidates.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
            candidates.dedup();
        }
        Self {
            titles,
            index,
            max_len,
        }
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(Self::from_titles(read_word_list(reader)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Sorted, one title per line.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.titles {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn titles(&self) -> &BTreeSet<String> {
        &self.titles
    }

    pub fn contains(&self, title: &str) -> bool {
        self.titles.contains(title)
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Length in words of the longest title starting at `words[start]`.
    pub fn longest_match<S: AsRef<str>>(&self, words: &[S], start: usize) -> Option<usize> {
        let candidates = self.index.get(words.get(start)?.as_ref())?;
        candidates
            .iter()
            .find(|c| {
                start + c.len() <= words.len()
                    && c.iter()
                        .zip(&words[start..])
                        .all(|(a, b)| a == b.as_ref())
            })
            .map(Vec::len)
    }
}

/// Greedy leftmost-longest labeling: every word of a matched title gets the
/// topic tag, everything else the outside tag.
pub fn weak_label<S: AsRef<str>>(words: &[S], gaz: &Gazetteer, scheme: &TagScheme) -> Vec<TagId> {
    let mut tags = vec![scheme.outside(); words.len()];
    let topic = scheme.topic();
    let mut i = 0;
    while i < words.len() {
        match gaz.longest_match(words, i) {
            Some(len) => {
                tags[i..i + len].fill(topic);
                i += len;
            }
            None => i += 1,
        }
    }
    tags
}
