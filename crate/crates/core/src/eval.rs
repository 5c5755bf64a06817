//! Span-set scoring with exact or partial (contained word n-gram) matching.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_pred: usize,
    pub n_ref: usize,
    pub n_matched_pred: usize,
    pub n_matched_ref: usize,
    pub partial_match: bool,
}

impl EvalReport {
    fn from_counts(c: Counts, partial_match: bool) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.matched_pred, c.pred);
        let recall = ratio(c.matched_ref, c.reference);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            n_pred: c.pred,
            n_ref: c.reference,
            n_matched_pred: c.matched_pred,
            n_matched_ref: c.matched_ref,
            partial_match,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Counts {
    pred: usize,
    reference: usize,
    matched_pred: usize,
    matched_ref: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.pred += o.pred;
        self.reference += o.reference;
        self.matched_pred += o.matched_pred;
        self.matched_ref += o.matched_ref;
    }
}

fn canonical(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn unique<S: AsRef<str>>(xs: &[S]) -> BTreeSet<String> {
    xs.iter()
        .map(|s| canonical(s.as_ref()))
        .filter(|s| !s.is_empty())
        .collect()
}

/// True when `needle` occurs in `hay` as a contiguous run of whole words.
pub fn contains_words(hay: &str, needle: &str) -> bool {
    let h: Vec<&str> = hay.split(' ').collect();
    let n: Vec<&str> = needle.split(' ').collect();
    n.len() <= h.len() && h.windows(n.len()).any(|w| w == n.as_slice())
}

fn count(pred: &BTreeSet<String>, reference: &BTreeSet<String>, partial: bool) -> Counts {
    let hit = |p: &str, r: &str| p == r || (partial && contains_words(p, r));
    Counts {
        pred: pred.len(),
        reference: reference.len(),
        matched_pred: pred
            .iter()
            .filter(|p| reference.iter().any(|r| hit(p, r)))
            .count(),
        matched_ref: reference
            .iter()
            .filter(|r| pred.iter().any(|p| hit(p, r)))
            .count(),
    }
}

/// Scores one prediction set against one reference set. Duplicates are
/// counted once; strings are lower-cased and whitespace-collapsed.
pub fn match_sets<S: AsRef<str>>(pred: &[S], reference: &[S], partial: bool) -> Result<EvalReport> {
    let (p, r) = (unique(pred), unique(reference));
    if r.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    if p.is_empty() {
        log::warn!("empty prediction set; precision reported as 0");
    }
    Ok(EvalReport::from_counts(count(&p, &r, partial), partial))
}

/// One line of a prediction or reference file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocSpans {
    pub doc_id: String,
    pub spans: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocReport {
    pub doc_id: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub overall: EvalReport,
    pub documents: Vec<DocReport>,
}

pub fn read_doc_spans<R: BufRead>(input: R) -> Result<Vec<DocSpans>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: DocSpans = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        out.push(doc);
    }
    Ok(out)
}

fn by_id(docs: &[DocSpans], what: &str) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut map = BTreeMap::new();
    for d in docs {
        if map.insert(d.doc_id.clone(), unique(&d.spans)).is_some() {
            return Err(Error::invalid(format!("duplicate doc_id {:?} in {what}", d.doc_id)));
        }
    }
    Ok(map)
}

/// Micro-averaged scores over documents aligned by id. Per-document reports
/// use 0 for any ratio with an empty denominator.
pub fn evaluate_documents(pred: &[DocSpans], reference: &[DocSpans], partial: bool) -> Result<RunReport> {
    let p = by_id(pred, "predictions")?;
    let r = by_id(reference, "references")?;
    let only_in_pred: Vec<String> = p.keys().filter(|k| !r.contains_key(*k)).cloned().collect();
    let only_in_ref: Vec<String> = r.keys().filter(|k| !p.contains_key(*k)).cloned().collect();
    if !only_in_pred.is_empty() || !only_in_ref.is_empty() {
        return Err(Error::Alignment {
            only_in_pred,
            only_in_ref,
        });
    }
    let mut total = Counts::default();
    let mut documents = Vec::with_capacity(p.len());
    for (id, preds) in &p {
        let c = count(preds, &r[id], partial);
        total += c;
        documents.push(DocReport {
            doc_id: id.clone(),
            report: EvalReport::from_counts(c, partial),
        });
    }
    if total.reference == 0 {
        return Err(Error::UndefinedRecall);
    }
    Ok(RunReport {
        overall: EvalReport::from_counts(total, partial),
        documents,
    })
}

pub fn evaluate_run(pred_path: &Path, ref_path: &Path, partial: bool) -> Result<RunReport> {
    let open = |p: &Path| -> Result<_> { Ok(std::io::BufReader::new(std::fs::File::open(p)?)) };
    let pred = read_doc_spans(open(pred_path)?)?;
    let reference = read_doc_spans(open(ref_path)?)?;
    evaluate_documents(&pred, &reference, partial)
}
