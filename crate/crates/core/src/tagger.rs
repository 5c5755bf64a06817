//! Training, windowed inference, span extraction and model files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::gazetteer::is_numeric_token;
use crate::neural::{self, Encoder, EncoderConfig, GruParams, Matrix, NetworkGrads, Real, TensorRef};
use crate::tokenizer::{detokenize, is_continuation, PieceId, PieceSequence, TagId, TagScheme, TaggedSequence, Vocabulary};

pub const DEFAULT_LONG_SEQ_LEN: usize = 512;
pub const DEFAULT_SHORT_SEQ_LEN: usize = 64;
pub const DEFAULT_STRIDE: usize = 32;

/// Records per gradient chunk. Chunks are summed independently and then
/// reduced in order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub precision_stop: f64,
    pub recall_stop: f64,
    pub eval_fraction: f64,
    pub seed: u64,
    /// Rescale each batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 30,
            precision_stop: 0.70,
            recall_stop: 0.90,
            eval_fraction: 0.1,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be at least 1"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::invalid("eval_fraction must lie in (0, 1)"));
        }
        for v in [self.precision_stop, self.recall_stop] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid("stop thresholds must lie in [0, 1]"));
            }
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_nll: f64,
    pub precision: f64,
    pub recall: f64,
}

/// All trainable parameters plus the settings they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel<S = f32> {
    pub encoder: Encoder<S>,
    pub gru: GruParams<S>,
    pub crf: CrfParams<S>,
    pub scheme: TagScheme,
    pub seq_len: usize,
    pub vocab_fingerprint: String,
}

/// Gradients for every trainable tensor of a [`TaggerModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub net: NetworkGrads,
    pub crf: CrfParams<f64>,
}

impl ModelGrads {
    fn zeros<S: Real>(m: &TaggerModel<S>) -> Self {
        Self {
            net: NetworkGrads::zeros(m.gru.input_dim(), m.gru.hidden_dim(), m.gru.n_tags()),
            crf: CrfParams::zeros(m.crf.n_tags()),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.net.add_assign(&other.net);
        self.crf.add_assign(&other.crf);
    }

    pub fn norm(&self) -> f64 {
        let dense = self
            .net
            .gru
            .tensors()
            .into_iter()
            .chain(self.crf.tensors())
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>();
        let sparse = self.net.embeddings.values().flatten().map(|v| v * v).sum::<f64>();
        (dense + sparse).sqrt()
    }
}

impl<S: Real> TaggerModel<S> {
    /// Assembles a model around an encoder; GRU and CRF weights are drawn
    /// from `rng`.
    pub fn new(
        encoder: Encoder<S>,
        hidden_dim: usize,
        scheme: TagScheme,
        seq_len: usize,
        vocab_fingerprint: String,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be positive"));
        }
        let k = scheme.len();
        let model = Self {
            gru: GruParams::init(encoder.embed_dim(), hidden_dim, k, rng),
            crf: CrfParams::init(k, rng),
            encoder,
            scheme,
            seq_len,
            vocab_fingerprint,
        };
        model.validate()?;
        Ok(model)
    }

    /// Trainable embedding lookup over `vocab`.
    pub fn with_lookup(
        vocab: &Vocabulary,
        scheme: TagScheme,
        embed_dim: usize,
        hidden_dim: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::lookup(vocab.len(), embed_dim, &mut rng)?;
        Self::new(encoder, hidden_dim, scheme, seq_len, vocab.fingerprint(), &mut rng)
    }

    /// Frozen rows from a precomputed-embedding file, keyed by piece id.
    pub fn with_precomputed(
        path: &Path,
        vocab: &Vocabulary,
        scheme: TagScheme,
        hidden_dim: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::precomputed(path)?;
        if encoder.rows() < vocab.len() {
            return Err(Error::invalid(format!(
                "{} embedding rows for a {}-piece vocabulary",
                encoder.rows(),
                vocab.len()
            )));
        }
        Self::new(encoder, hidden_dim, scheme, seq_len, vocab.fingerprint(), &mut rng)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::invalid("seq_len must be at least 2"));
        }
        self.gru.validate()?;
        self.crf.validate()?;
        let k = self.scheme.len();
        if self.gru.n_tags() != k || self.crf.n_tags() != k {
            return Err(Error::invalid("tag count differs from the scheme"));
        }
        if self.gru.input_dim() != self.encoder.embed_dim() {
            return Err(Error::invalid("GRU input dim differs from the embedding dim"));
        }
        Ok(())
    }

    /// Emission matrix for one window of piece ids.
    pub fn emissions(&self, ids: &[PieceId]) -> Result<Matrix<S>> {
        Ok(neural::forward(&self.encoder, &self.gru, ids)?.0)
    }

    /// CRF negative log-likelihood of `tags` and its gradients.
    pub fn loss_and_gradients(&self, ids: &[PieceId], tags: &[TagId]) -> Result<(f64, ModelGrads)> {
        let (e, cache) = neural::forward(&self.encoder, &self.gru, ids)?;
        let out = crf::nll_and_gradients(&e, tags, &self.crf)?;
        let net = neural::backward(&out.d_emissions, &cache, &self.gru, self.encoder.trainable())?;
        Ok((out.loss, ModelGrads { net, crf: out.grads }))
    }

    /// `params -= scale · grads`
    pub fn apply(&mut self, grads: &ModelGrads, scale: f64) {
        let step = |p: &mut [S], g: &[f64]| {
            for (a, b) in p.iter_mut().zip(g) {
                *a = S::cast(a.wide() - scale * b);
            }
        };
        for (p, g) in self.gru.tensors_mut().into_iter().zip(grads.net.gru.tensors()) {
            step(p, g.data);
        }
        for (p, g) in self.crf.tensors_mut().into_iter().zip(grads.crf.tensors()) {
            step(p, g.data);
        }
        if self.encoder.trainable() {
            let table = self.encoder.table_mut();
            for (&id, g) in &grads.net.embeddings {
                step(table.row_mut(id as usize), g);
            }
        }
    }

    fn is_finite(&self) -> bool {
        let dense = self
            .gru
            .tensors()
            .into_iter()
            .chain(self.crf.tensors())
            .all(|t| t.data.iter().all(|v| v.wide().is_finite()));
        dense && self.encoder.table().as_slice().iter().all(|v| v.wide().is_finite())
    }

    /// Named tensors in file order. Frozen embeddings are not included.
    pub fn tensors(&self) -> Vec<TensorRef<'_, S>> {
        let mut out = Vec::new();
        if self.encoder.trainable() {
            let t = self.encoder.table();
            out.push(TensorRef {
                name: "embedding.table".into(),
                shape: vec![t.rows(), t.cols()],
                data: t.as_slice(),
            });
        }
        out.extend(self.gru.tensors());
        out.extend(self.crf.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = Vec::new();
        if self.encoder.trainable() {
            out.push(self.encoder.table_mut().as_mut_slice());
        }
        out.extend(self.gru.tensors_mut());
        out.extend(self.crf.tensors_mut());
        out
    }
}

fn check_record<S: Real>(model: &TaggerModel<S>, rec: &TaggedSequence) -> Result<()> {
    if rec.is_empty() {
        return Err(Error::invalid("empty training record"));
    }
    if rec.len() > model.seq_len {
        return Err(Error::invalid(format!(
            "record of {} pieces exceeds seq_len {}",
            rec.len(),
            model.seq_len
        )));
    }
    if rec.tags.len() != rec.len() || rec.piece_ids.len() != rec.len() {
        return Err(Error::invalid("record pieces, ids and tags differ in length"));
    }
    for &t in &rec.tags {
        model.scheme.check(t)?;
    }
    if let Some(&id) = rec.piece_ids.iter().find(|&&id| id as usize >= model.encoder.rows()) {
        return Err(Error::invalid(format!("piece id {id} outside the embedding table")));
    }
    Ok(())
}

/// Token-level precision and recall of non-outside tags; 0 for an empty
/// denominator.
pub fn token_precision_recall(gold: &[Vec<TagId>], pred: &[Vec<TagId>], scheme: &TagScheme) -> (f64, f64) {
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        for (&gt, &pt) in g.iter().zip(p) {
            let (gi, pi) = (!scheme.is_outside(gt), !scheme.is_outside(pt));
            n_gold += gi as usize;
            n_pred += pi as usize;
            tp += (gi && pi && gt == pt) as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(tp, n_pred), ratio(tp, n_gold))
}

/// Sum of losses and gradients over `records`, accumulated in index order.
fn batch_gradients<S: Real>(model: &TaggerModel<S>, records: &[&TaggedSequence]) -> Result<(f64, ModelGrads)> {
    let partial: Vec<Result<(f64, ModelGrads)>> = records
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc = ModelGrads::zeros(model);
            for rec in chunk {
                let (l, g) = model.loss_and_gradients(&rec.piece_ids, &rec.tags)?;
                loss += l;
                acc.add_assign(&g);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut loss = 0.0;
    let mut total = ModelGrads::zeros(model);
    for p in partial {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Mini-batch gradient descent on mean CRF NLL with early stopping on
/// held-out token precision/recall.
///
/// A seeded shuffle holds out `eval_fraction` of the records (at least one,
/// and the whole corpus when it has a single record). Returns the
/// parameters at the stopping epoch and one metrics entry per epoch.
pub fn train<S: Real>(
    corpus: &[TaggedSequence],
    cfg: &TrainConfig,
    mut model: TaggerModel<S>,
) -> Result<(TaggerModel<S>, Vec<EpochMetrics>)> {
    cfg.validate()?;
    model.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    for rec in corpus {
        check_record(&model, rec)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let (mut train_idx, eval_idx) = if corpus.len() < 2 {
        log::warn!("single-record corpus; evaluating on the training record");
        (order.clone(), order)
    } else {
        let n_eval = ((corpus.len() as f64 * cfg.eval_fraction).round() as usize).clamp(1, corpus.len() - 1);
        let eval = order.split_off(corpus.len() - n_eval);
        (order, eval)
    };
    let gold: Vec<Vec<TagId>> = eval_idx.iter().map(|&i| corpus[i].tags.clone()).collect();

    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let records: Vec<&TaggedSequence> = batch.iter().map(|&i| &corpus[i]).collect();
            let (loss, grads) = batch_gradients(&model, &records)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total_loss += loss;
            let mut scale = cfg.learning_rate / batch.len() as f64;
            if let Some(clip) = cfg.clip_norm {
                let norm = grads.norm() / batch.len() as f64;
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            model.apply(&grads, scale);
            if !model.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
        }
        let mean_nll = total_loss / train_idx.len() as f64;

        let pred = eval_idx
            .par_iter()
            .map(|&i| decode_window(&model, &corpus[i].piece_ids))
            .collect::<Result<Vec<_>>>()?;
        let (precision, recall) = token_precision_recall(&gold, &pred, &model.scheme);
        log::info!(
            "epoch {epoch}: mean nll {mean_nll:.4}, precision {precision:.4}, recall {recall:.4}"
        );
        log.push(EpochMetrics {
            epoch,
            mean_nll,
            precision,
            recall,
        });
        if precision >= cfg.precision_stop && recall >= cfg.recall_stop {
            break;
        }
    }
    Ok((model, log))
}

/// Viterbi tags for one window of at most `seq_len` pieces.
pub fn decode_window<S: Real>(model: &TaggerModel<S>, ids: &[PieceId]) -> Result<Vec<TagId>> {
    if ids.len() > model.seq_len {
        return Err(Error::invalid(format!(
            "window of {} pieces exceeds seq_len {}",
            ids.len(),
            model.seq_len
        )));
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let e = model.emissions(ids)?;
    Ok(crf::viterbi(&e, &model.crf)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanSource {
    LongContext,
    ShortContext,
    Merged,
}

/// A detected n-gram over word indices `[word_start, word_end)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub word_start: usize,
    pub word_end: usize,
    pub text: String,
    pub source: SpanSource,
}

fn span_text<S: AsRef<str>>(words: &[S], start: usize, end: usize) -> String {
    words[start..end]
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One span per maximal run of non-outside word tags.
pub fn extract_spans<S: AsRef<str>>(
    words: &[S],
    tags: &[TagId],
    scheme: &TagScheme,
    source: SpanSource,
) -> Result<Vec<Span>> {
    if words.len() != tags.len() {
        return Err(Error::invalid(format!(
            "{} words but {} tags",
            words.len(),
            tags.len()
        )));
    }
    let mut spans = Vec::new();
    let mut start = None;
    for i in 0..=tags.len() {
        let inside = i < tags.len() && !scheme.is_outside(tags[i]);
        match (inside, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(Span {
                    word_start: s,
                    word_end: i,
                    text: span_text(words, s, i),
                    source,
                });
                start = None;
            }
            _ => {}
        }
    }
    Ok(spans)
}

/// Sorts intervals and merges those that overlap (touching ones stay apart).
fn merge_intervals(mut iv: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    iv.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s < last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Window start offsets: `0, stride, 2·stride, …`, plus one right-aligned
/// window when the strided ones do not reach the end.
pub fn window_starts(n: usize, seq_len: usize, stride: usize) -> Vec<usize> {
    if n <= seq_len {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        out.push(s);
        if s + seq_len >= n {
            break;
        }
        s += stride;
        if s + seq_len > n {
            out.push(n - seq_len);
            break;
        }
    }
    out
}

/// Word interval covered by piece run `[a, b)` after trimming partial words
/// at both ends.
fn run_to_words(a: usize, b: usize, pieces: &[String], word_of: &[usize], roots: &[usize]) -> Option<(usize, usize)> {
    let mut a = a;
    while a < b && is_continuation(&pieces[a]) {
        a += 1;
    }
    let mut b = b;
    if b < pieces.len() && is_continuation(&pieces[b]) {
        // the word straddling b is incomplete; cut back to its root
        b = roots[word_of[b]];
    }
    (a < b).then(|| (word_of[a], word_of[b - 1] + 1))
}

/// Word intervals detected in the window at `start`.
fn window_intervals<S: Real>(
    model: &TaggerModel<S>,
    seq: &PieceSequence,
    start: usize,
    word_of: &[usize],
    roots: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let end = (start + model.seq_len).min(seq.len());
    let tags = decode_window(model, &seq.piece_ids[start..end])?;
    let mut out = Vec::new();
    let mut run = None;
    for i in 0..=tags.len() {
        let inside = i < tags.len() && !model.scheme.is_outside(tags[i]);
        match (inside, run) {
            (true, None) => run = Some(i),
            (false, Some(r)) => {
                out.extend(run_to_words(start + r, start + i, &seq.pieces, word_of, roots));
                run = None;
            }
            _ => {}
        }
    }
    Ok(out)
}

fn spans_from_intervals<S: AsRef<str>>(iv: Vec<(usize, usize)>, words: &[S], source: SpanSource) -> Vec<Span> {
    merge_intervals(iv)
        .into_iter()
        .map(|(s, e)| Span {
            word_start: s,
            word_end: e,
            text: span_text(words, s, e),
            source,
        })
        .collect()
}

fn piece_word_index(seq: &PieceSequence) -> Result<(Vec<usize>, Vec<usize>)> {
    if seq.pieces.first().is_some_and(|p| is_continuation(p)) {
        return Err(Error::invalid("piece sequence starts with a continuation piece"));
    }
    if seq.piece_ids.len() != seq.len() {
        return Err(Error::invalid("pieces and ids differ in length"));
    }
    let roots = crate::tokenizer::root_positions(&seq.pieces);
    let mut word_of = Vec::with_capacity(seq.len());
    let mut w = 0;
    for (i, _) in seq.pieces.iter().enumerate() {
        if w + 1 < roots.len() && roots[w + 1] == i {
            w += 1;
        }
        word_of.push(w);
    }
    Ok((word_of, roots))
}

/// Decodes strided windows over a long piece sequence and merges the
/// detected word intervals across windows.
pub fn sliding_infer<S: Real>(
    model: &TaggerModel<S>,
    seq: &PieceSequence,
    stride: usize,
    source: SpanSource,
) -> Result<Vec<Span>> {
    if stride == 0 || stride > model.seq_len {
        return Err(Error::invalid(format!(
            "stride must lie in 1..={}, got {stride}",
            model.seq_len
        )));
    }
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let (word_of, roots) = piece_word_index(seq)?;
    let words = detokenize(&seq.pieces)?;
    let starts = window_starts(seq.len(), model.seq_len, stride);
    let per_window = starts
        .par_iter()
        .map(|&s| window_intervals(model, seq, s, &word_of, &roots))
        .collect::<Result<Vec<_>>>()?;
    Ok(spans_from_intervals(per_window.concat(), &words, source))
}

/// Same as [`sliding_infer`] but decoding a window at every possible offset.
/// Slow; used as a reference.
pub fn all_offsets_infer<S: Real>(model: &TaggerModel<S>, seq: &PieceSequence, source: SpanSource) -> Result<Vec<Span>> {
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let (word_of, roots) = piece_word_index(seq)?;
    let words = detokenize(&seq.pieces)?;
    let last = seq.len().saturating_sub(model.seq_len);
    let per_window = (0..=last)
        .into_par_iter()
        .map(|s| window_intervals(model, seq, s, &word_of, &roots))
        .collect::<Result<Vec<_>>>()?;
    Ok(spans_from_intervals(per_window.concat(), &words, source))
}

/// Union of two span sets over the same words. Overlapping spans merge into
/// their covering interval; a merged group keeps its source when all members
/// share it and becomes [`SpanSource::Merged`] otherwise.
pub fn dual_union<S: AsRef<str>>(long: &[Span], short: &[Span], words: &[S]) -> Result<Vec<Span>> {
    let mut all: Vec<&Span> = long.iter().chain(short).collect();
    if let Some(bad) = all.iter().find(|s| s.word_start >= s.word_end || s.word_end > words.len()) {
        return Err(Error::invalid(format!(
            "span [{}, {}) outside {} words",
            bad.word_start,
            bad.word_end,
            words.len()
        )));
    }
    all.sort_by_key(|s| (s.word_start, s.word_end, s.source));
    let mut out: Vec<Span> = Vec::new();
    for s in all {
        match out.last_mut() {
            Some(last) if s.word_start < last.word_end => {
                last.word_end = last.word_end.max(s.word_end);
                if last.source != s.source {
                    last.source = SpanSource::Merged;
                }
            }
            _ => out.push(s.clone()),
        }
    }
    for s in &mut out {
        s.text = span_text(words, s.word_start, s.word_end);
    }
    Ok(out)
}

/// Drops spans whose words are all numeric.
pub fn drop_numeric_spans(spans: Vec<Span>) -> Vec<Span> {
    spans
        .into_iter()
        .filter(|s| !s.text.split(' ').all(is_numeric_token))
        .collect()
}

pub const MODEL_MAGIC: &[u8; 4] = b"TPSQ";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    scheme: TagScheme,
    encoder: EncoderConfig,
    embed_dim: usize,
    hidden_dim: usize,
    n_tags: usize,
    seq_len: usize,
    vocab_fingerprint: String,
}

fn put_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("value does not fit in u32"))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Writes the model: magic, version, JSON metadata, then named f32 tensors.
pub fn save_model<S: Real, W: Write>(model: &TaggerModel<S>, mut out: W) -> Result<()> {
    let meta = ModelMeta {
        scheme: model.scheme.clone(),
        encoder: model.encoder.config().clone(),
        embed_dim: model.encoder.embed_dim(),
        hidden_dim: model.gru.hidden_dim(),
        n_tags: model.gru.n_tags(),
        seq_len: model.seq_len,
        vocab_fingerprint: model.vocab_fingerprint.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    out.write_all(MODEL_MAGIC)?;
    put_u32(&mut out, MODEL_VERSION as usize)?;
    put_u32(&mut out, meta.len())?;
    out.write_all(&meta)?;
    let tensors = model.tensors();
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        put_u32(&mut out, t.name.len())?;
        out.write_all(t.name.as_bytes())?;
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for v in t.data {
            out.write_all(&(v.wide() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_model_file<S: Real>(model: &TaggerModel<S>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleModel(msg.into())
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => incompatible("truncated model file"),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as usize)
    }
}

/// Reads a model written by [`save_model`]. Frozen encoders are reloaded
/// from their embedding file.
pub fn load_model<S: Real, R: Read>(input: R) -> Result<TaggerModel<S>> {
    let mut r = Reader(input);
    if r.bytes(4)? != MODEL_MAGIC {
        return Err(incompatible("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION as usize {
        return Err(incompatible(format!("unsupported model version {version}")));
    }
    let meta_len = r.u32()?;
    if meta_len > 1 << 24 {
        return Err(incompatible("metadata block too large"));
    }
    let meta: ModelMeta = serde_json::from_slice(&r.bytes(meta_len)?)
        .map_err(|e| incompatible(format!("bad metadata: {e}")))?;

    let encoder = match &meta.encoder {
        EncoderConfig::TrainableLookup { vocab_size, embed_dim } => Encoder::zeros(*vocab_size, *embed_dim)?,
        EncoderConfig::PrecomputedFile { file_path, .. } => Encoder::precomputed(file_path)?,
    };
    if encoder.embed_dim() != meta.embed_dim || meta.n_tags != meta.scheme.len() {
        return Err(incompatible("metadata dimensions disagree"));
    }
    let mut model = TaggerModel {
        encoder,
        gru: GruParams::zeros(meta.embed_dim, meta.hidden_dim, meta.n_tags),
        crf: CrfParams::zeros(meta.n_tags),
        scheme: meta.scheme,
        seq_len: meta.seq_len,
        vocab_fingerprint: meta.vocab_fingerprint,
    };
    let expected: Vec<(String, Vec<usize>)> = model.tensors().into_iter().map(|t| (t.name, t.shape)).collect();

    let n = r.u32()?;
    if n != expected.len() {
        return Err(incompatible(format!("{n} tensors, expected {}", expected.len())));
    }
    let mut loaded: BTreeMap<String, Vec<S>> = BTreeMap::new();
    for _ in 0..n {
        let name_len = r.u32()?;
        if name_len > 256 {
            return Err(incompatible("tensor name too long"));
        }
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| incompatible("tensor name is not UTF-8"))?;
        let rank = r.u32()?;
        if rank > 4 {
            return Err(incompatible("tensor rank too large"));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let Some((_, want)) = expected.iter().find(|(n, _)| *n == name) else {
            return Err(incompatible(format!("unexpected tensor {name:?}")));
        };
        if *want != shape {
            return Err(incompatible(format!("tensor {name:?} has shape {shape:?}, expected {want:?}")));
        }
        let count: usize = shape.iter().product();
        let data = r
            .bytes(count * 4)?
            .chunks_exact(4)
            .map(|c| S::cast(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        if loaded.insert(name.clone(), data).is_some() {
            return Err(incompatible(format!("duplicate tensor {name:?}")));
        }
    }
    for ((name, _), dst) in expected.iter().zip(model.tensors_mut()) {
        let src = loaded.remove(name).ok_or_else(|| incompatible(format!("missing tensor {name:?}")))?;
        dst.copy_from_slice(&src);
    }
    model.validate().map_err(|e| incompatible(e.to_string()))?;
    Ok(model)
}

/// Loads a model and checks it was trained against `vocab`.
pub fn load_model_for<S: Real>(path: &Path, vocab: &Vocabulary) -> Result<TaggerModel<S>> {
    let model: TaggerModel<S> = load_model(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let fp = vocab.fingerprint();
    if model.vocab_fingerprint != fp {
        return Err(incompatible(format!(
            "{} was trained with vocabulary {}, got {fp}",
            path.display(),
            model.vocab_fingerprint
        )));
    }
    if model.encoder.trainable() && model.encoder.rows() != vocab.len() {
        return Err(incompatible("embedding rows differ from the vocabulary size"));
    }
    Ok(model)
}
