//! Synthetic sequence-classification tasks and JSONL ingestion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerConfig;

/// Token id reserved for padding.
pub const PAD: usize = 0;

/// Number of top-of-vocabulary ids reserved for generator marker tokens.
const RESERVED_MARKERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    /// Label 1 iff the marker token occurs.
    Presence,
    /// Label 1 iff token A occurs before token B (both occur once).
    Order,
    /// Label 1 iff token X occurs more often than token Y.
    Majority,
    /// Pre-split JSONL files of `{"text": ..., "label": ...}` objects.
    Jsonl { train: PathBuf, validation: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub source: TaskSource,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
}

fn default_train_size() -> usize {
    512
}

fn default_validation_size() -> usize {
    256
}

impl TaskSpec {
    pub fn synthetic(source: TaskSource, train_size: usize, validation_size: usize) -> Self {
        Self {
            source,
            train_size,
            validation_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

/// Builds the train and validation splits for `spec`. Synthetic splits are
/// deterministic in `seed` and never share an example.
pub fn generate_task(spec: &TaskSpec, model: &TransformerConfig, seed: u64) -> Result<Dataset> {
    if let TaskSource::Jsonl { train, validation } = &spec.source {
        let tok = HashTokenizer::new(model.vocab_size, model.max_seq_len)?;
        return Ok(Dataset {
            train: load_jsonl(train, &tok, model.num_classes)?,
            validation: load_jsonl(validation, &tok, model.num_classes)?,
        });
    }
    if spec.train_size == 0 {
        return Err(Error::config("task.train_size", "must be at least 1"));
    }
    if spec.validation_size == 0 {
        return Err(Error::config("task.validation_size", "must be at least 1"));
    }
    if model.num_classes < 2 {
        return Err(Error::config(
            "model.num_classes",
            "synthetic tasks are binary",
        ));
    }
    if model.vocab_size < RESERVED_MARKERS + 3 {
        return Err(Error::config(
            "model.vocab_size",
            format!(
                "synthetic tasks need at least {} tokens",
                RESERVED_MARKERS + 3
            ),
        ));
    }
    if model.max_seq_len < 4 {
        return Err(Error::config(
            "model.max_seq_len",
            "synthetic tasks need length >= 4",
        ));
    }

    let gen = Generator::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.train_size + spec.validation_size;
    let mut seen = HashSet::with_capacity(total);
    let mut examples = Vec::with_capacity(total);
    let max_attempts = total * 50;
    let mut attempts = 0;
    while examples.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::config(
                "task",
                format!("could not draw {total} distinct examples; shrink the splits"),
            ));
        }
        let label = examples.len() % 2;
        let ex = gen.draw(&spec.source, label, &mut rng);
        if seen.insert(ex.tokens.clone()) {
            examples.push(ex);
        }
    }
    examples.shuffle(&mut rng);
    let validation = examples.split_off(spec.train_size);
    Ok(Dataset {
        train: examples,
        validation,
    })
}

struct Generator {
    content: usize,
    marker: usize,
    token_a: usize,
    token_b: usize,
    token_x: usize,
    token_y: usize,
    min_len: usize,
    max_len: usize,
}

impl Generator {
    fn new(cfg: &TransformerConfig) -> Self {
        let v = cfg.vocab_size;
        Self {
            content: v - RESERVED_MARKERS,
            marker: v - 1,
            token_a: v - 2,
            token_b: v - 3,
            token_x: v - 4,
            token_y: v - 5,
            min_len: (cfg.max_seq_len / 2).max(4),
            max_len: cfg.max_seq_len,
        }
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        (0..len).map(|_| rng.gen_range(1..self.content)).collect()
    }

    fn draw(&self, source: &TaskSource, label: usize, rng: &mut ChaCha8Rng) -> Example {
        let mut tokens = self.filler(rng);
        let len = tokens.len();
        match source {
            TaskSource::Presence => {
                if label == 1 {
                    tokens[rng.gen_range(0..len)] = self.marker;
                }
            }
            TaskSource::Order => {
                let i = rng.gen_range(0..len);
                let mut j = rng.gen_range(0..len - 1);
                if j >= i {
                    j += 1;
                }
                let (first, second) = (i.min(j), i.max(j));
                let (early, late) = if label == 1 {
                    (self.token_a, self.token_b)
                } else {
                    (self.token_b, self.token_a)
                };
                tokens[first] = early;
                tokens[second] = late;
            }
            TaskSource::Majority => {
                // An odd number of votes so there is never a tie.
                let votes = 2 * rng.gen_range(0..(len - 1) / 2 + 1) + 1;
                let winners = rng.gen_range(votes / 2 + 1..=votes);
                let mut positions: Vec<usize> = (0..len).collect();
                positions.shuffle(rng);
                let (win, lose) = if label == 1 {
                    (self.token_x, self.token_y)
                } else {
                    (self.token_y, self.token_x)
                };
                for (n, &p) in positions.iter().take(votes).enumerate() {
                    tokens[p] = if n < winners { win } else { lose };
                }
            }
            TaskSource::Jsonl { .. } => unreachable!("file tasks are not generated"),
        }
        Example { tokens, label }
    }
}

/// Whitespace tokenizer mapping each word to a hash bucket in `[1, vocab_size)`.
/// The hash is FNV-1a over the UTF-8 bytes, so ids are stable across runs and
/// platforms.
#[derive(Clone, Debug)]
pub struct HashTokenizer {
    vocab_size: usize,
    max_len: usize,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize, max_len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::config(
                "model.vocab_size",
                "tokenizer needs at least 2 ids",
            ));
        }
        if max_len == 0 {
            return Err(Error::config("model.max_seq_len", "must be at least 1"));
        }
        Ok(Self {
            vocab_size,
            max_len,
        })
    }

    pub fn token_id(&self, word: &str) -> usize {
        1 + (fnv1a(word.as_bytes()) % (self.vocab_size as u64 - 1)) as usize
    }

    /// Tokenizes and keeps the first `max_len` words.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .take(self.max_len)
            .map(|w| self.token_id(w))
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    label: serde_json::Value,
}

pub fn load_jsonl(
    path: &Path,
    tokenizer: &HashTokenizer,
    num_classes: usize,
) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file), tokenizer, num_classes).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses JSONL from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_jsonl(
    reader: impl BufRead,
    tokenizer: &HashTokenizer,
    num_classes: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = record
            .label
            .as_u64()
            .map(|l| l as usize)
            .filter(|&l| l < num_classes)
            .ok_or_else(|| {
                Error::Input(format!(
                    "line {line_no}: unknown label {} (expected 0..{num_classes})",
                    record.label
                ))
            })?;
        let tokens = tokenizer.encode(&record.text);
        if tokens.is_empty() {
            return Err(Error::Input(format!("line {line_no}: empty text")));
        }
        out.push(Example { tokens, label });
    }
    Ok(out)
}

/// Writes examples as JSONL, rendering token `n` as the word `w{n}`.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let text: Vec<String> = ex.tokens.iter().map(|t| format!("w{t}")).collect();
        let line = serde_json::json!({ "text": text.join(" "), "label": ex.label });
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
