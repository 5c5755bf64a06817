//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero when a criterion fails, except for criteria listed in
//! `KNOWN_UNATTAINABLE`, which still print FAIL but do not fail the run.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicner::corpus::{emit_document, Document, DEFAULT_EMBED_DIM};
use topicner::crf::{log_partition, nll_and_gradients, viterbi, CrfParams};
use topicner::eval::match_sets;
use topicner::gazetteer::clean_titles;
use topicner::neural::Matrix;
use topicner::tagger::{self, all_offsets_infer, dual_union, load_model, load_model_for, save_model, save_model_file, sliding_infer};
use topicner::tokenizer::tokenize_words;
use topicner::{CleaningConfig, Error, Gazetteer, SpanSource, TagScheme, TaggedSequence, TaggerModel, TrainConfig, Vocabulary};

/// Criterion 3 compares against fixed reference rows whose tag row is longer
/// than the text row it labels (see README).
const KNOWN_UNATTAINABLE: &[usize] = &[3];

type Check = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_crf(k: usize, scale: f64, rng: &mut ChaCha8Rng) -> CrfParams<f64> {
    let mut p = CrfParams::zeros(k);
    p.trans = Matrix::from_fn(k, k, |_, _| rng.gen_range(-scale..scale));
    p.start = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();
    p.end = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();
    p
}

/// Score of one tag path, written out independently of the library.
fn oracle_score(e: &Matrix<f64>, y: &[usize], p: &CrfParams<f64>) -> f64 {
    let mut s = p.start[y[0]] + p.end[y[y.len() - 1]];
    for (t, &tag) in y.iter().enumerate() {
        s += e.get(t, tag);
        if t > 0 {
            s += p.trans.get(y[t - 1], tag);
        }
    }
    s
}

fn all_paths(t: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..k.pow(t as u32)).map(move |mut code| {
        (0..t)
            .map(|_| {
                let d = code % k;
                code /= k;
                d
            })
            .collect()
    })
}

fn c1_crf_enumeration() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst_z, mut worst_v) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let t = r.gen_range(1..=8);
        let k = r.gen_range(1..=4);
        let e = Matrix::from_fn(t, k, |_, _| r.gen_range(-3.0..3.0));
        let p = random_crf(k, 2.0, &mut r);

        let mut best: Option<(f64, Vec<usize>)> = None;
        let scores: Vec<f64> = all_paths(t, k)
            .map(|y| {
                let s = oracle_score(&e, &y, &p);
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, y));
                }
                s
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        let (best_score, best_path) = best.unwrap();

        let lib_z = log_partition(&e, &p).map_err(|e| e.to_string())?;
        let (path, score) = viterbi(&e, &p).map_err(|e| e.to_string())?;
        worst_z = worst_z.max((lib_z - z).abs());
        worst_v = worst_v.max((score - best_score).abs());
        ensure((lib_z - z).abs() <= 1e-6, || format!("instance {i}: log Z {lib_z} vs {z}"))?;
        ensure(path == best_path, || format!("instance {i}: viterbi {path:?} vs {best_path:?}"))?;
        ensure((score - best_score).abs() <= 1e-9, || format!("instance {i}: score {score} vs {best_score}"))?;
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "100 instances, max |dlogZ| {worst_z:.1e}, max |dscore| {worst_v:.1e}, {elapsed:.2?}"
    ))
}

/// Relative error with a small floor so components that are zero in exact
/// arithmetic compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

const FD_EPS: f64 = 1e-4;

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(FD_EPS) - f(-FD_EPS)) / (2.0 * FD_EPS)
}

fn crf_fd_instance(r: &mut ChaCha8Rng) -> Result<(f64, usize), String> {
    let t = r.gen_range(1..=6);
    let k = r.gen_range(2..=4);
    let e = Matrix::from_fn(t, k, |_, _| r.gen_range(-2.0..2.0));
    let p = random_crf(k, 1.0, r);
    let y: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();
    let out = nll_and_gradients(&e, &y, &p).map_err(|e| e.to_string())?;
    let loss = |e: &Matrix<f64>, p: &CrfParams<f64>| nll_and_gradients(e, &y, p).unwrap().loss;
    let mut worst = 0.0f64;
    let mut n = 0;
    for i in 0..t {
        for j in 0..k {
            let fd = central(|d| {
                let mut e2 = e.clone();
                e2.set(i, j, e.get(i, j) + d);
                loss(&e2, &p)
            });
            worst = worst.max(rel_err(out.d_emissions.get(i, j), fd));
            n += 1;
        }
    }
    let analytic: Vec<Vec<f64>> = out.grads.tensors().iter().map(|t| t.data.to_vec()).collect();
    for (ti, g) in analytic.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let fd = central(|d| {
                let mut p2 = p.clone();
                p2.tensors_mut()[ti][j] += d;
                loss(&e, &p2)
            });
            worst = worst.max(rel_err(gj, fd));
            n += 1;
        }
    }
    Ok((worst, n))
}

fn fd_vocab() -> Vocabulary {
    let pieces: Vec<String> = ["[UNK]", "a", "b", "c", "d", "##e", "##f"].map(String::from).to_vec();
    Vocabulary::new(pieces, "[UNK]").unwrap()
}

fn model_fd_instance(seed: u64, v: &Vocabulary) -> Result<(f64, usize), String> {
    let mut r = rng(seed);
    let mut m: TaggerModel<f64> =
        TaggerModel::with_lookup(v, TagScheme::default(), 3, 4, 16, seed).map_err(|e| e.to_string())?;
    // non-zero biases so every parameter path is exercised
    for b in m.gru.tensors_mut() {
        for x in b.iter_mut() {
            *x += r.gen_range(-0.1..0.1);
        }
    }
    let t = r.gen_range(2..=6);
    let ids: Vec<u32> = (0..t).map(|_| r.gen_range(0..v.len() as u32)).collect();
    let tags: Vec<usize> = (0..t).map(|_| r.gen_range(0..2)).collect();
    let (_, g) = m.loss_and_gradients(&ids, &tags).map_err(|e| e.to_string())?;
    let loss = |m: &TaggerModel<f64>| m.loss_and_gradients(&ids, &tags).unwrap().0;

    let mut worst = 0.0f64;
    let mut n = 0;
    let d = m.encoder.embed_dim();
    for row in 0..m.encoder.rows() {
        let analytic = g.net.embeddings.get(&(row as u32));
        for j in 0..d {
            let fd = central(|eps| {
                let mut p = m.clone();
                let x = p.encoder.table().get(row, j);
                p.encoder.table_mut().set(row, j, x + eps);
                loss(&p)
            });
            worst = worst.max(rel_err(analytic.map_or(0.0, |a| a[j]), fd));
            n += 1;
        }
    }
    let gru: Vec<Vec<f64>> = g.net.gru.tensors().iter().map(|t| t.data.to_vec()).collect();
    for (ti, gt) in gru.iter().enumerate() {
        for (j, &gj) in gt.iter().enumerate() {
            let fd = central(|eps| {
                let mut p = m.clone();
                p.gru.tensors_mut()[ti][j] += eps;
                loss(&p)
            });
            worst = worst.max(rel_err(gj, fd));
            n += 1;
        }
    }
    let crf: Vec<Vec<f64>> = g.crf.tensors().iter().map(|t| t.data.to_vec()).collect();
    for (ti, gt) in crf.iter().enumerate() {
        for (j, &gj) in gt.iter().enumerate() {
            let fd = central(|eps| {
                let mut p = m.clone();
                p.crf.tensors_mut()[ti][j] += eps;
                loss(&p)
            });
            worst = worst.max(rel_err(gj, fd));
            n += 1;
        }
    }
    Ok((worst, n))
}

fn c2_gradients() -> Check {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut crf_worst, mut crf_n) = (0.0f64, 0);
    for _ in 0..50 {
        let (w, n) = crf_fd_instance(&mut r)?;
        crf_worst = crf_worst.max(w);
        crf_n += n;
    }
    let v = fd_vocab();
    let (mut net_worst, mut net_n) = (0.0f64, 0);
    for i in 0..50 {
        let (w, n) = model_fd_instance(1000 + i, &v)?;
        net_worst = net_worst.max(w);
        net_n += n;
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "crf: 50 instances, {crf_n} components, max rel err {crf_worst:.1e}; \
         bi-gru+crf: 50 instances, {net_n} components, max rel err {net_worst:.1e}; {elapsed:.2?}"
    );
    ensure(crf_worst < 1e-4 && net_worst < 1e-4, || detail.clone())?;
    within(elapsed, Duration::from_secs(60))?;
    Ok(detail)
}

const TABLE_TEXT: &str = "the me too movement with a large variety of local and international related names, \
                          is a movement against sexual harassment and sexual assault";
const TABLE_TOKENIZED: &str = "the me too movement with a large variety of local and international related names, \
                               is a movement against sexual har ##ass ##ment and sexual assault";
const TABLE_TOKENIZED_TAGS: &str =
    "0 NER NER NER 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 0 NER NER NER NER 0 NER NER";

fn first_difference(a: &[&str], b: &[&str]) -> String {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => format!("first difference at {i}: {:?} vs {:?}", a[i], b[i]),
        None => "common prefix matches".into(),
    }
}

fn c3_table_rows() -> Check {
    let titles = ["me too movement", "sexual harassment", "sexual assault"];
    let (gaz, _) = clean_titles(&titles, &CleaningConfig::default()).map_err(|e| e.to_string())?;
    let mut pieces: Vec<String> = ["[UNK]", ",", "har", "##ass", "##ment"].map(String::from).to_vec();
    for w in TABLE_TEXT.replace(',', "").split_whitespace() {
        if w != "harassment" && !pieces.iter().any(|p| p == w) {
            pieces.push(w.to_string());
        }
    }
    let v = Vocabulary::new(pieces, "[UNK]").map_err(|e| e.to_string())?;
    let scheme = TagScheme::default();
    let doc = Document::new("table", TABLE_TEXT, DEFAULT_EMBED_DIM).map_err(|e| e.to_string())?;
    let records = emit_document(&doc, &gaz, &v, &scheme, 512).map_err(|e| e.to_string())?;
    ensure(records.len() == 1, || format!("{} records", records.len()))?;
    let rec = &records[0];
    let got_text = rec.pieces.join(" ");
    let got_tags: Vec<&str> = rec.tags.iter().map(|&t| scheme.label(t).unwrap()).collect();
    let want_text: Vec<&str> = TABLE_TOKENIZED.split(' ').collect();
    let want_tags: Vec<&str> = TABLE_TOKENIZED_TAGS.split(' ').collect();

    if got_text == TABLE_TOKENIZED && got_tags == want_tags {
        return Ok(format!("{} pieces, {} tags match", rec.len(), want_tags.len()));
    }
    let got_pieces: Vec<&str> = rec.pieces.iter().map(String::as_str).collect();
    Err(format!(
        "text row: {} tokens expected, {} produced ({}); tag row: {} tags expected, {} produced ({}); \
         the expected tag row is longer than its own text row by {}",
        want_text.len(),
        got_pieces.len(),
        first_difference(&got_pieces, &want_text),
        want_tags.len(),
        got_tags.len(),
        first_difference(&got_tags, &want_tags),
        want_tags.len() as isize - want_text.len() as isize,
    ))
}

fn c4_cleaning_fixture() -> Check {
    let raw = [
        "which", "29", "101", "lga-775", "x00", "apple", "cricket", "Me Too Movement", "delhi", "beef ban",
        "1,000", "the",
    ];
    let cfg = CleaningConfig {
        location_whitelist: ["delhi".to_string()].into(),
        ..CleaningConfig::default()
    };
    let (gaz, stats) = clean_titles(&raw, &cfg).map_err(|e| e.to_string())?;
    let got: BTreeSet<&str> = gaz.titles().iter().map(String::as_str).collect();
    let want: BTreeSet<&str> = ["me too movement", "delhi", "beef ban"].into();
    ensure(got == want, || format!("kept {got:?}, expected {want:?}"))?;
    Ok(format!("kept {got:?}; {stats:?}"))
}

/// Synthetic planted-topic corpus: pseudo-words built from two-letter
/// syllables, so topic words split into root and continuation pieces.
struct Synthetic {
    vocab: Vocabulary,
    gaz: Gazetteer,
    sentences: Vec<String>,
}

fn synthetic(n_sentences: usize, n_topics: usize, seed: u64) -> Synthetic {
    let mut r = rng(seed);
    let syllables: Vec<String> = "bdfgklmnprstvz"
        .chars()
        .flat_map(|c| "aeiou".chars().map(move |v| format!("{c}{v}")))
        .collect();
    let mut pieces = vec!["[UNK]".to_string(), ".".to_string()];
    pieces.extend(syllables.iter().cloned());
    pieces.extend(syllables.iter().map(|s| format!("##{s}")));

    let mut seen = BTreeSet::new();
    let mut word = |r: &mut ChaCha8Rng| loop {
        let n = r.gen_range(1..=3);
        let w: String = (0..n).map(|_| syllables.choose(r).unwrap().as_str()).collect();
        if seen.insert(w.clone()) {
            return w;
        }
    };
    let filler: Vec<String> = (0..300).map(|_| word(&mut r)).collect();
    let pool: Vec<String> = (0..80).map(|_| word(&mut r)).collect();
    let mut topics = BTreeSet::new();
    while topics.len() < n_topics {
        let n = r.gen_range(2..=3);
        topics.insert(pool.choose_multiple(&mut r, n).cloned().collect::<Vec<_>>().join(" "));
    }
    let topics: Vec<String> = topics.into_iter().collect();

    let sentences = (0..n_sentences)
        .map(|_| {
            let mut words: Vec<String> = (0..r.gen_range(5..=14)).map(|_| filler.choose(&mut r).unwrap().clone()).collect();
            let planted = if r.gen_bool(0.2) { 2 } else { 1 };
            for _ in 0..planted {
                let at = r.gen_range(0..=words.len());
                words.insert(at, topics.choose(&mut r).unwrap().clone());
            }
            // a lone topic word outside any topic
            if r.gen_bool(0.3) {
                let at = r.gen_range(0..=words.len());
                words.insert(at, pool.choose(&mut r).unwrap().clone());
            }
            words.join(" ")
        })
        .collect();
    Synthetic {
        vocab: Vocabulary::new(pieces, "[UNK]").unwrap(),
        gaz: Gazetteer::from_titles(topics),
        sentences,
    }
}

fn c5_synthetic_training() -> Check {
    let start = Instant::now();
    let data = synthetic(2000, 50, 5);
    ensure(data.vocab.len() <= 500, || format!("vocabulary has {} pieces", data.vocab.len()))?;
    ensure(data.gaz.len() == 50, || format!("{} topics", data.gaz.len()))?;
    let scheme = TagScheme::default();
    let mut records: Vec<TaggedSequence> = Vec::new();
    for (i, s) in data.sentences.iter().enumerate() {
        let doc = Document::new(format!("s{i}"), s.as_str(), DEFAULT_EMBED_DIM).map_err(|e| e.to_string())?;
        records.extend(emit_document(&doc, &data.gaz, &data.vocab, &scheme, 64).map_err(|e| e.to_string())?);
    }
    ensure(records.len() == 2000, || format!("{} records", records.len()))?;
    let unk = data.vocab.unk_id();
    ensure(records.iter().all(|r| !r.piece_ids.contains(&unk)), || "unknown pieces in corpus".into())?;

    let model = TaggerModel::<f32>::with_lookup(&data.vocab, scheme, 64, 64, 64, 5).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        max_epochs: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (_, log) = pool
        .install(|| tagger::train(&records, &cfg, model))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let last = log.last().unwrap();
    let detail = format!(
        "stopped after {} epochs: precision {:.3}, recall {:.3}, mean nll {:.3}; {elapsed:.1?}",
        last.epoch, last.precision, last.recall, last.mean_nll
    );
    ensure(last.precision >= 0.70 && last.recall >= 0.90, || detail.clone())?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(detail)
}

fn c6_partial_match() -> Check {
    let pred = ["president of nrgi"];
    let reference = ["nrgi"];
    let on = match_sets(&pred, &reference, true).map_err(|e| e.to_string())?;
    let off = match_sets(&pred, &reference, false).map_err(|e| e.to_string())?;
    let detail = format!(
        "partial on: P={} R={}; partial off: P={} R={}",
        on.precision, on.recall, off.precision, off.recall
    );
    ensure(
        on.precision == 1.0 && on.recall == 1.0 && off.precision == 0.0 && off.recall == 0.0,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn c7_sliding_windows() -> Check {
    let mut pieces = vec!["[UNK]".to_string()];
    for c in 'a'..='p' {
        pieces.push(c.to_string());
        pieces.push(format!("##{c}"));
    }
    let v = Vocabulary::new(pieces, "[UNK]").unwrap();
    let model = |seq_len, seed| {
        let mut m = TaggerModel::<f32>::with_lookup(&v, TagScheme::default(), 8, 8, seq_len, seed).unwrap();
        m.gru.proj_b[1] = 0.4;
        m
    };
    let short = model(64, 71);
    let long = model(128, 72);
    let mut r = rng(7);
    let (mut n_spans, mut n_oracle) = (0, 0);
    for doc in 0..20 {
        let mut words = Vec::new();
        let mut left = 200;
        while left > 0 {
            let len = r.gen_range(1..=3usize.min(left));
            left -= len;
            words.push((0..len).map(|_| (b'a' + r.gen_range(0..16u8)) as char).collect::<String>());
        }
        let seq = tokenize_words(&words, &v).map_err(|e| e.to_string())?;
        ensure(seq.len() == 200, || format!("document {doc} has {} pieces", seq.len()))?;
        let a = sliding_infer(&short, &seq, 32, SpanSource::ShortContext).map_err(|e| e.to_string())?;
        let oracle = all_offsets_infer(&short, &seq, SpanSource::ShortContext).map_err(|e| e.to_string())?;
        for s in &a {
            ensure(
                oracle.iter().any(|o| o.word_start <= s.word_start && s.word_end <= o.word_end),
                || format!("document {doc}: {s:?} is not inside any oracle span"),
            )?;
        }
        let b = sliding_infer(&long, &seq, 32, SpanSource::LongContext).map_err(|e| e.to_string())?;
        let u = |x: &[_], y: &[_]| dual_union(x, y, &words).unwrap();
        ensure(u(&a, &a) == a && u(&b, &b) == b, || format!("document {doc}: union not idempotent"))?;
        ensure(u(&a, &b) == u(&b, &a), || format!("document {doc}: union not commutative"))?;
        let ab = u(&a, &b);
        ensure(u(&ab, &ab) == ab, || format!("document {doc}: merged union not idempotent"))?;
        n_spans += a.len();
        n_oracle += oracle.len();
    }
    ensure(n_spans > 0, || "no spans produced".into())?;
    Ok(format!("20 documents, {n_spans} strided spans inside {n_oracle} oracle spans"))
}

fn c8_serialization() -> Check {
    let v = fd_vocab();
    let m = TaggerModel::<f32>::with_lookup(&v, TagScheme::default(), 8, 6, 32, 8).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    save_model(&m, &mut buf).map_err(|e| e.to_string())?;
    let back: TaggerModel<f32> = load_model(&buf[..]).map_err(|e| e.to_string())?;
    let (a, b) = (m.tensors(), back.tensors());
    ensure(a.len() == b.len(), || "tensor count differs".into())?;
    let mut n_values = 0;
    for (x, y) in a.iter().zip(&b) {
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(x.name == y.name && x.shape == y.shape, || format!("{} header differs", x.name))?;
        ensure(bits(x.data) == bits(y.data), || format!("{} values differ", x.name))?;
        n_values += x.data.len();
    }
    ensure(m == back, || "model differs after reload".into())?;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tpsq");
    save_model_file(&m, &path).map_err(|e| e.to_string())?;
    load_model_for::<f32>(&path, &v).map_err(|e| e.to_string())?;
    let other = Vocabulary::new(["[UNK]", "a", "b"].map(String::from).to_vec(), "[UNK]").unwrap();
    match load_model_for::<f32>(&path, &other) {
        Err(Error::IncompatibleModel(_)) => {}
        other => return Err(format!("mismatched vocabulary accepted: {:?}", other.map(|_| ()))),
    }
    Ok(format!("{} tensors, {n_values} values bit-exact; mismatched fingerprint rejected", a.len()))
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c9_pipeline_determinism() -> Check {
    let start = Instant::now();
    let input = "{\"doc_id\":\"n1\",\"text\":\"Leaders of the Aam Aadmi Party met after the protest\"}\n\
                 {\"doc_id\":\"n2\",\"text\":\"The Supreme Court statement on climate change\"}\n";
    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let fx = common::Fixture::new(dir.path(), 40, 9);
        common::write(&fx.path("news.jsonl"), input);
        fx.prepare(&["--deterministic", "--seed", "7"]);
        let cfg = fx.config();
        let news = fx.path_str("news.jsonl");
        let out = fx.path_str("out/tagged.jsonl");
        common::run_ok(&["--config", &cfg, "--deterministic", "--seed", "7", "tag", "--input", &news, "--output", &out]);
        tree_bytes(&fx.path("out"))
    };
    let a = run_once();
    let b = run_once();
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    ensure(names.len() >= 8, || format!("too few outputs: {names:?}"))?;
    ensure(a.len() == b.len(), || "output file sets differ".into())?;
    for ((na, da), (nb, db)) in a.iter().zip(&b) {
        ensure(na == nb, || format!("{na} vs {nb}"))?;
        ensure(da == db, || format!("{na} differs between runs"))?;
    }
    let bytes: usize = a.iter().map(|(_, d)| d.len()).sum();
    Ok(format!("{} files, {bytes} bytes identical across runs; {:.1?}", a.len(), start.elapsed()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "crf decoding and partition match enumeration", c1_crf_enumeration),
        (2, "analytic gradients match finite differences", c2_gradients),
        (3, "table rows reproduced character for character", c3_table_rows),
        (4, "cleaning rule fixture", c4_cleaning_fixture),
        (5, "synthetic corpus reaches P>=0.70, R>=0.90 within 16 epochs", c5_synthetic_training),
        (6, "partial-match protocol", c6_partial_match),
        (7, "sliding windows agree with all-offsets oracle", c7_sliding_windows),
        (8, "bit-exact serialization and fingerprint check", c8_serialization),
        (9, "pipeline outputs are byte-identical across runs", c9_pipeline_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut hard_failures = 0;
    for (n, name, check) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        match result {
            Ok(detail) => println!("[{n}] PASS {name} ({elapsed:.2?}): {detail}"),
            Err(detail) => {
                let known = KNOWN_UNATTAINABLE.contains(&n);
                if !known {
                    hard_failures += 1;
                }
                let tag = if known { " [known unattainable]" } else { "" };
                println!("[{n}] FAIL{tag} {name} ({elapsed:.2?}): {detail}");
            }
        }
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
