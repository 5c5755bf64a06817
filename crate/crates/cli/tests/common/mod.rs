#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BIN: &str = env!("CARGO_BIN_EXE_topicner");

pub const FILLER: [&str; 16] = [
    "the", "report", "said", "on", "monday", "that", "officials", "in", "a", "new", "statement", "were", "leaders",
    "met", "after", "protest",
];
pub const TOPICS: [&str; 5] = ["aam aadmi party", "beef ban", "climate change", "supreme court", "me too movement"];

pub fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write(path: &Path, text: &str) {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    std::fs::write(path, text).unwrap();
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = (0..rng.gen_range(4..9)).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
    let at = rng.gen_range(0..=words.len());
    words.insert(at, TOPICS[rng.gen_range(0..TOPICS.len())]);
    words.join(" ")
}

/// A self-contained pipeline workspace: titles, vocabulary, documents and a
/// config that points at them with relative paths.
pub struct Fixture {
    pub root: PathBuf,
}

impl Fixture {
    pub fn new(root: &Path, n_docs: usize, seed: u64) -> Self {
        let mut titles: Vec<String> = TOPICS.iter().map(|t| t.to_string()).collect();
        titles.extend(["which", "2019", "x00", "protest"].map(String::from));
        write(&root.join("titles.txt"), &(titles.join("\n") + "\n"));

        let mut pieces = vec!["[UNK]".to_string(), ".".into(), ",".into()];
        for w in FILLER.iter().copied().chain(TOPICS.iter().flat_map(|t| t.split(' '))) {
            if !pieces.iter().any(|p| p == w) {
                pieces.push(w.to_string());
            }
        }
        write(&root.join("vocab.txt"), &(pieces.join("\n") + "\n"));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n_docs {
            let text = (0..3).map(|_| sentence(&mut rng)).collect::<Vec<_>>().join(" . ");
            write(&root.join(format!("docs/d{i:03}.txt")), &text);
        }

        write(
            &root.join("config.toml"),
            r#"seq_lens = [32, 16]

[paths]
titles = "titles.txt"
gazetteer = "out/gazetteer.txt"
vocab = "vocab.txt"
corpus_in = "docs"
corpus_out = "out/corpus"
model_out = "out/models"

[model]
embed_dim = 16
hidden_dim = 16

[train]
learning_rate = 0.1
batch_size = 8
max_epochs = 30
seed = 1
"#,
        );
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> String {
        self.root.join("config.toml").display().to_string()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn path_str(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    /// clean-titles, build-corpus and train.
    pub fn prepare(&self, extra: &[&str]) {
        let cfg = self.config();
        for cmd in ["clean-titles", "build-corpus", "train"] {
            let mut args = vec!["--config", cfg.as_str(), cmd];
            args.extend_from_slice(extra);
            run_ok(&args);
        }
    }
}
