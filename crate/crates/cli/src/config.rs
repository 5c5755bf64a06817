use std::path::{Path, PathBuf};

use serde::Deserialize;
use topicner::gazetteer::{default_stoplist, read_word_list, DEFAULT_TECHNICAL_PATTERN};
use topicner::{CleaningConfig, TrainConfig};

use crate::CliError;

/// File locations. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw title list, one per line.
    pub titles: Option<PathBuf>,
    /// Replaces the built-in stoplist when set.
    pub stoplist: Option<PathBuf>,
    pub locations: Option<PathBuf>,
    /// Cleaned gazetteer: written by clean-titles, read by build-corpus.
    pub gazetteer: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// Directory of `.txt` documents.
    pub corpus_in: Option<PathBuf>,
    /// Directory for corpus and manifest files.
    pub corpus_out: Option<PathBuf>,
    /// Directory for models and metrics logs.
    pub model_out: Option<PathBuf>,
    /// Precomputed-embedding file; switches the encoder to frozen rows.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningSection {
    pub technical_patterns: Vec<String>,
    pub technical_max_chars: usize,
    pub keep_ngram_range: [usize; 2],
    pub remove_any_numeric_token: bool,
}

impl Default for CleaningSection {
    fn default() -> Self {
        let d = CleaningConfig::default();
        Self {
            technical_patterns: vec![DEFAULT_TECHNICAL_PATTERN.to_string()],
            technical_max_chars: d.technical_max_chars,
            keep_ngram_range: [d.keep_ngram_range.0, d.keep_ngram_range.1],
            remove_any_numeric_token: d.remove_any_numeric_token,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: topicner::neural::DEFAULT_EMBED_DIM,
            hidden_dim: topicner::neural::DEFAULT_HIDDEN_DIM,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seq_lens: Vec<usize>,
    pub dedup_threshold: f64,
    /// Window stride for tagging; half of each model's seq_len when unset.
    pub stride: Option<usize>,
    pub doc_embed_dim: usize,
    pub paths: Paths,
    pub cleaning: CleaningSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seq_lens: vec![
                topicner::tagger::DEFAULT_LONG_SEQ_LEN,
                topicner::tagger::DEFAULT_SHORT_SEQ_LEN,
            ],
            dedup_threshold: topicner::corpus::DEFAULT_DEDUP_THRESHOLD,
            stride: None,
            doc_embed_dim: topicner::corpus::DEFAULT_EMBED_DIM,
            paths: Paths::default(),
            cleaning: CleaningSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::input(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.titles,
            &mut p.stoplist,
            &mut p.locations,
            &mut p.gazetteer,
            &mut p.vocab,
            &mut p.corpus_in,
            &mut p.corpus_out,
            &mut p.model_out,
            &mut p.embeddings,
        ] {
            if let Some(rel) = slot.as_ref().filter(|p| p.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seq_lens.is_empty() {
            return Err(CliError::input("seq_lens must not be empty"));
        }
        if self.seq_lens.iter().any(|&l| l < 2) {
            return Err(CliError::input("every seq_len must be at least 2"));
        }
        let mut sorted = self.seq_lens.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seq_lens.len() {
            return Err(CliError::input("seq_lens must be distinct"));
        }
        if self.stride == Some(0) {
            return Err(CliError::input("stride must be positive"));
        }
        Ok(())
    }

    pub fn stride_for(&self, seq_len: usize) -> usize {
        self.stride.map_or((seq_len / 2).max(1), |s| s.min(seq_len))
    }

    pub fn cleaning_config(&self) -> Result<CleaningConfig, CliError> {
        let words = |p: &Path| -> Result<_, CliError> {
            let f = open_input(p)?;
            read_word_list(f).map_err(CliError::from)
        };
        Ok(CleaningConfig {
            common_words: match &self.paths.stoplist {
                Some(p) => words(p)?,
                None => default_stoplist(),
            },
            location_whitelist: match &self.paths.locations {
                Some(p) => words(p)?,
                None => Default::default(),
            },
            technical_patterns: self.cleaning.technical_patterns.clone(),
            technical_max_chars: self.cleaning.technical_max_chars,
            keep_ngram_range: (self.cleaning.keep_ngram_range[0], self.cleaning.keep_ngram_range[1]),
            remove_any_numeric_token: self.cleaning.remove_any_numeric_token,
        })
    }
}

pub fn open_input(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| CliError::input(format!("cannot open {}: {e}", path.display())))
}

/// A required path: the flag value if given, else the config entry.
pub fn require(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| CliError::input(format!("no {name} path: set paths.{name} or pass --{}", name.replace('_', "-"))))
}
