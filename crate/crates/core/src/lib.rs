//! Weakly supervised topic n-gram detection.
//!
//! The crate builds tag-aligned training corpora from a cleaned title
//! gazetteer, trains a bidirectional GRU with a linear-chain CRF output layer
//! over subword pieces, and extracts case-less topic spans with sliding-window
//! Viterbi decoding. An evaluation module scores span sets with exact or
//! partial matching.
//!
//! Pipeline order:
//!
//! 1. [`gazetteer::clean_titles`] turns a raw title list into a [`Gazetteer`].
//! 2. [`corpus`] normalizes documents, removes near duplicates, picks an
//!    n-gram covering subset and emits [`TaggedSequence`] records.
//! 3. [`tagger::train`] fits a [`TaggerModel`] on those records.
//! 4. [`tagger::sliding_infer`] and [`tagger::dual_union`] extract spans.
//! 5. [`eval::match_sets`] / [`eval::evaluate_run`] score the spans.

pub mod corpus;
pub mod crf;
pub mod error;
pub mod eval;
pub mod gazetteer;
pub mod math;
pub mod neural;
pub mod tagger;
pub mod tokenizer;

pub use error::{Error, Result};
pub use gazetteer::{CleaningConfig, Gazetteer};
pub use tagger::{Span, SpanSource, TaggerModel, TrainConfig};
pub use tokenizer::{PieceSequence, TagScheme, TaggedSequence, Vocabulary};
