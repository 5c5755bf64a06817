use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topicner::corpus::{self, Document, ManifestEntry};
use topicner::eval;
use topicner::tagger::{self, drop_numeric_spans, dual_union, sliding_infer};
use topicner::tokenizer::{normalize, tokenize_words};
use topicner::{Gazetteer, SpanSource, TagScheme, TaggerModel, Vocabulary};

use crate::config::{open_input, require, PipelineConfig};
use crate::CliError;

pub fn corpus_file(dir: &Path, seq_len: usize) -> PathBuf {
    dir.join(format!("corpus_{seq_len}.conll"))
}

pub fn manifest_file(dir: &Path, seq_len: usize) -> PathBuf {
    dir.join(format!("manifest_{seq_len}.jsonl"))
}

pub fn model_file(dir: &Path, seq_len: usize) -> PathBuf {
    dir.join(format!("model_{seq_len}.tpsq"))
}

pub fn metrics_file(dir: &Path, seq_len: usize) -> PathBuf {
    dir.join(format!("metrics_{seq_len}.jsonl"))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = create(path)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    open_input(path)?;
    Ok(Vocabulary::load(path)?)
}

pub struct CleanArgs {
    pub titles: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub stats: Option<PathBuf>,
}

pub fn clean_titles(cfg: &PipelineConfig, args: CleanArgs) -> Result<(), CliError> {
    let titles_path = require(&args.titles, &cfg.paths.titles, "titles")?;
    let out_path = require(&args.out, &cfg.paths.gazetteer, "gazetteer")?;
    let mut titles = Vec::new();
    for line in BufReader::new(open_input(&titles_path)?).lines() {
        titles.push(line?);
    }
    let cleaning = cfg.cleaning_config()?;
    let (gaz, stats) = topicner::gazetteer::clean_titles(&titles, &cleaning)?;
    let mut out = create(&out_path)?;
    gaz.write(&mut out)?;
    out.flush()?;
    let json = serde_json::to_string_pretty(&stats)?;
    if let Some(p) = args.stats {
        let mut f = create(&p)?;
        writeln!(f, "{json}")?;
        f.flush()?;
    }
    println!("{json}");
    log::info!("kept {} of {} titles", stats.kept, stats.input);
    Ok(())
}

pub struct BuildArgs {
    pub docs: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// `.txt` files of a directory in name order, id = file stem.
fn read_documents(dir: &Path, dim: usize) -> Result<Vec<Document>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::input(format!("cannot read documents dir {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut docs = Vec::with_capacity(files.len());
    for path in files {
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path)?;
        if normalize(&text).is_empty() {
            log::warn!("skipping empty document {}", path.display());
            continue;
        }
        docs.push(Document::new(id, text, dim)?);
    }
    if docs.is_empty() {
        return Err(CliError::input(format!("no non-empty .txt documents in {}", dir.display())));
    }
    Ok(docs)
}

pub fn build_corpus(cfg: &PipelineConfig, args: BuildArgs) -> Result<(), CliError> {
    let docs_dir = require(&args.docs, &cfg.paths.corpus_in, "corpus_in")?;
    let gaz_path = require(&args.gazetteer, &cfg.paths.gazetteer, "gazetteer")?;
    let vocab_path = require(&args.vocab, &cfg.paths.vocab, "vocab")?;
    let out_dir = require(&args.out_dir, &cfg.paths.corpus_out, "corpus_out")?;

    open_input(&gaz_path)?;
    let gaz = Gazetteer::load(&gaz_path)?;
    let vocab = load_vocab(&vocab_path)?;
    let docs = read_documents(&docs_dir, cfg.doc_embed_dim)?;
    let n_raw = docs.len();
    let docs = corpus::dedup(docs, cfg.dedup_threshold)?;
    let n_unique = docs.len();
    let docs = corpus::select_min_cover(docs, corpus::DEFAULT_NGRAM_RANGE)?;
    log::info!("{n_raw} documents, {n_unique} after dedup, {} after cover selection", docs.len());

    let scheme = TagScheme::default();
    std::fs::create_dir_all(&out_dir)?;
    for &seq_len in &cfg.seq_lens {
        let mut manifest = Vec::new();
        let mut out = create(&corpus_file(&out_dir, seq_len))?;
        for item in corpus::emit_parallel_corpus(&docs, &gaz, &vocab, &scheme, seq_len) {
            let (id, records) = item?;
            corpus::write_conll(&mut out, &records, &scheme)?;
            manifest.push(ManifestEntry::new(id, &records));
        }
        out.flush()?;
        write_jsonl(&manifest_file(&out_dir, seq_len), &manifest)?;
    }
    Ok(())
}

pub struct TrainArgs {
    pub corpus_dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn train(cfg: &PipelineConfig, args: TrainArgs) -> Result<(), CliError> {
    let corpus_dir = require(&args.corpus_dir, &cfg.paths.corpus_out, "corpus_out")?;
    let vocab_path = require(&args.vocab, &cfg.paths.vocab, "vocab")?;
    let out_dir = require(&args.out_dir, &cfg.paths.model_out, "model_out")?;
    let vocab = load_vocab(&vocab_path)?;
    let scheme = TagScheme::default();
    cfg.train.validate()?;

    for &seq_len in &cfg.seq_lens {
        let path = corpus_file(&corpus_dir, seq_len);
        let records = corpus::read_conll(BufReader::new(open_input(&path)?), &vocab, &scheme)?;
        let model: TaggerModel = match &cfg.paths.embeddings {
            Some(emb) => {
                open_input(emb)?;
                TaggerModel::with_precomputed(emb, &vocab, scheme.clone(), cfg.model.hidden_dim, seq_len, cfg.train.seed)?
            }
            None => TaggerModel::with_lookup(
                &vocab,
                scheme.clone(),
                cfg.model.embed_dim,
                cfg.model.hidden_dim,
                seq_len,
                cfg.train.seed,
            )?,
        };
        log::info!("training seq_len {seq_len} on {} records", records.len());
        let (model, log) = tagger::train(&records, &cfg.train, model)?;
        std::fs::create_dir_all(&out_dir)?;
        tagger::save_model_file(&model, &model_file(&out_dir, seq_len))?;
        write_jsonl(&metrics_file(&out_dir, seq_len), &log)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TagInput {
    doc_id: String,
    text: String,
}

pub struct TagArgs {
    pub input: PathBuf,
    pub output: Option<PathBuf>,
    pub models_dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

/// Topic strings for one text: windowed decoding per model, union across
/// models, numeric spans dropped.
pub fn tag_text(models: &[(TaggerModel, usize)], vocab: &Vocabulary, text: &str) -> Result<Vec<String>, CliError> {
    let words = normalize(text);
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let seq = tokenize_words(&words, vocab)?;
    let longest = models.iter().map(|(m, _)| m.seq_len).max().unwrap_or(0);
    let mut merged = Vec::new();
    for (model, stride) in models {
        let source = if model.seq_len == longest {
            SpanSource::LongContext
        } else {
            SpanSource::ShortContext
        };
        let spans = sliding_infer(model, &seq, *stride, source)?;
        merged = dual_union(&merged, &spans, &words)?;
    }
    let mut out: Vec<String> = Vec::new();
    for s in drop_numeric_spans(merged) {
        if !out.contains(&s.text) {
            out.push(s.text);
        }
    }
    Ok(out)
}

pub fn load_models(cfg: &PipelineConfig, dir: &Path, vocab: &Vocabulary) -> Result<Vec<(TaggerModel, usize)>, CliError> {
    cfg.seq_lens
        .iter()
        .map(|&seq_len| {
            let path = model_file(dir, seq_len);
            open_input(&path)?;
            let model: TaggerModel = tagger::load_model_for(&path, vocab)?;
            if model.seq_len != seq_len {
                return Err(CliError::model(format!(
                    "{} has seq_len {}, expected {seq_len}",
                    path.display(),
                    model.seq_len
                )));
            }
            Ok((model, cfg.stride_for(seq_len)))
        })
        .collect()
}

pub fn tag(cfg: &PipelineConfig, args: TagArgs) -> Result<(), CliError> {
    let models_dir = require(&args.models_dir, &cfg.paths.model_out, "model_out")?;
    let vocab_path = require(&args.vocab, &cfg.paths.vocab, "vocab")?;
    let input = BufReader::new(open_input(&args.input)?);
    let vocab = load_vocab(&vocab_path)?;
    let models = load_models(cfg, &models_dir, &vocab)?;

    let mut out: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: TagInput = serde_json::from_str(&line)
            .map_err(|e| CliError::input(format!("{} line {}: {e}", args.input.display(), n + 1)))?;
        let spans = tag_text(&models, &vocab, &doc.text)?;
        serde_json::to_writer(
            &mut out,
            &eval::DocSpans {
                doc_id: doc.doc_id,
                spans,
            },
        )?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub struct EvalArgs {
    pub pred: PathBuf,
    pub reference: PathBuf,
    pub partial: bool,
    pub output: Option<PathBuf>,
}

pub fn evaluate(args: EvalArgs) -> Result<(), CliError> {
    open_input(&args.pred)?;
    open_input(&args.reference)?;
    let report = eval::evaluate_run(&args.pred, &args.reference, args.partial)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &args.output {
        let mut f = create(p)?;
        writeln!(f, "{json}")?;
        f.flush()?;
    }
    println!("{json}");
    Ok(())
}
