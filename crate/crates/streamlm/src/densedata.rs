//! Timed instruction data: a small closed-vocabulary tokenizer, timestamp
//! assignment for answers, synthetic clip generation, and a versioned
//! JSONL corpus format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Frame, TimedToken};

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("corpus header missing or malformed")]
    MissingHeader,
    #[error("unsupported corpus format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("item {id}: {reason}")]
    InvalidItem { id: u64, reason: String },
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("answer interval [{t_start}, {t_end}] is invalid")]
    InvalidInterval { t_start: f64, t_end: f64 },
    #[error("answer has no tokens")]
    EmptyAnswer,
}

pub const N_SYMBOLS: usize = 8;
const SYMBOL_WORDS: [&str; N_SYMBOLS] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
];
const QUESTION_WORDS: [&str; 8] = [
    "what", "do", "you", "see", "now", "describe", "the", "scene",
];

pub const EOS: u32 = 0;
pub const UNK: u32 = 1;
const SYMBOL_BASE: u32 = 2;

/// Fixed whitespace tokenizer over a closed word list.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words = vec!["<eos>".to_string(), "<unk>".to_string()];
        words.extend(SYMBOL_WORDS.iter().map(|s| s.to_string()));
        words.extend(QUESTION_WORDS.iter().map(|s| s.to_string()));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(|s| s.as_str()).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| DataError::UnknownWord(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn symbol_token(&self, symbol: u32) -> u32 {
        SYMBOL_BASE + symbol
    }

    pub fn token_symbol(&self, token: u32) -> Option<u32> {
        if (SYMBOL_BASE..SYMBOL_BASE + N_SYMBOLS as u32).contains(&token) {
            Some(token - SYMBOL_BASE)
        } else {
            None
        }
    }
}

/// Stamp an instruction-plus-answer pair. Every instruction token carries
/// the question time `t_start`; answer token i carries
/// `t_start + i / decode_rate`, so an answer of m tokens spans
/// `[t_start, t_start + (m - 1) / decode_rate]`.
pub fn assign_timestamps(
    instruction: &[u32],
    answer: &[u32],
    t_start: f64,
    decode_rate: f64,
) -> Result<Vec<TimedToken>> {
    if answer.is_empty() {
        return Err(DataError::EmptyAnswer);
    }
    if !(t_start >= 0.0) || !(decode_rate > 0.0) {
        return Err(DataError::InvalidInterval {
            t_start,
            t_end: t_start,
        });
    }
    let mut out = Vec::with_capacity(instruction.len() + answer.len());
    for &id in instruction {
        out.push(TimedToken { id, time: t_start });
    }
    for (i, &id) in answer.iter().enumerate() {
        out.push(TimedToken {
            id,
            time: t_start + i as f64 / decode_rate,
        });
    }
    Ok(out)
}

/// One synthetic clip: a per-second symbol timeline and one question whose
/// answer names the symbol visible at each answer-token timestamp.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusItem {
    pub id: u64,
    /// symbols[s] is the symbol on screen during second s.
    pub symbols: Vec<u32>,
    pub question: String,
    pub answer: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Seconds added to each answer-token time when choosing the named
    /// symbol. Zero for the normal corpus; positive values make the label
    /// depend on frames after the token's timestamp.
    #[serde(default)]
    pub probe_offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    items: Option<usize>,
}

pub const CORPUS_FORMAT: &str = "timed-symbol-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n_items: usize,
    pub duration_s: usize,
    /// Per-second probability the symbol resamples.
    pub change_prob: f64,
    pub min_answer_words: usize,
    pub max_answer_words: usize,
    pub probe_offset: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_items: 1000,
            duration_s: 150,
            change_prob: 0.05,
            min_answer_words: 4,
            max_answer_words: 8,
            probe_offset: 0.0,
        }
    }
}

fn symbol_at(symbols: &[u32], t: f64) -> u32 {
    let idx = (t.floor().max(0.0) as usize).min(symbols.len() - 1);
    symbols[idx]
}

/// Generate a deterministic corpus. Answer word i names the symbol active
/// at `t_start + i + probe_offset`; the answer ends with `<eos>` stamped
/// one second after the last word, setting `t_end`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Vec<CorpusItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(cfg.n_items);
    for id in 0..cfg.n_items as u64 {
        let mut symbols = Vec::with_capacity(cfg.duration_s);
        let mut cur: u32 = rng.gen_range(0..N_SYMBOLS as u32);
        for _ in 0..cfg.duration_s {
            if rng.gen_bool(cfg.change_prob) {
                cur = rng.gen_range(0..N_SYMBOLS as u32);
            }
            symbols.push(cur);
        }
        let n_words = rng.gen_range(cfg.min_answer_words..=cfg.max_answer_words);
        // leave room for the whole answer (and any probe offset) inside the clip
        let last_needed = n_words as f64 + cfg.probe_offset;
        let max_start = cfg.duration_s as f64 - 1.0 - last_needed;
        if max_start < 1.0 {
            return Err(DataError::InvalidItem {
                id,
                reason: format!(
                    "duration {}s too short for {} answer words with offset {}",
                    cfg.duration_s, n_words, cfg.probe_offset
                ),
            });
        }
        let t_start = rng.gen_range(1..=max_start as usize) as f64;
        let words: Vec<&str> = (0..n_words)
            .map(|i| {
                let sym = symbol_at(&symbols, t_start + i as f64 + cfg.probe_offset);
                SYMBOL_WORDS[sym as usize]
            })
            .collect();
        let t_end = t_start + n_words as f64;
        items.push(CorpusItem {
            id,
            symbols,
            question: "what do you see now".to_string(),
            answer: words.join(" "),
            t_start,
            t_end,
            probe_offset: cfg.probe_offset,
        });
    }
    Ok(items)
}

/// Check an item's internal consistency: interval ordering, symbol range,
/// and that every answer word matches the timeline at its stamped time.
pub fn verify_item(vocab: &Vocab, item: &CorpusItem) -> Result<()> {
    let fail = |reason: String| DataError::InvalidItem {
        id: item.id,
        reason,
    };
    if item.symbols.is_empty() {
        return Err(fail("empty symbol timeline".into()));
    }
    if item.symbols.iter().any(|&s| s >= N_SYMBOLS as u32) {
        return Err(fail("symbol id out of range".into()));
    }
    if !(item.t_start >= 0.0 && item.t_end > item.t_start) {
        return Err(DataError::InvalidInterval {
            t_start: item.t_start,
            t_end: item.t_end,
        });
    }
    let words: Vec<u32> = vocab.encode(&item.answer)?;
    if words.is_empty() {
        return Err(DataError::EmptyAnswer);
    }
    if item.t_end != item.t_start + words.len() as f64 {
        return Err(fail(format!(
            "t_end {} does not match {} answer words from {}",
            item.t_end,
            words.len(),
            item.t_start
        )));
    }
    for (i, &w) in words.iter().enumerate() {
        let sym = vocab
            .token_symbol(w)
            .ok_or_else(|| fail(format!("answer word {i} is not a symbol word")))?;
        let expect = symbol_at(&item.symbols, item.t_start + i as f64 + item.probe_offset);
        if sym != expect {
            return Err(fail(format!(
                "answer word {i} names symbol {sym}, timeline has {expect}"
            )));
        }
    }
    Ok(())
}

pub fn save_corpus(path: &Path, seed: u64, items: &[CorpusItem]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        seed: Some(seed),
        items: Some(items.len()),
    };
    writeln!(f, "{}", serde_json::to_string(&header).expect("header"))?;
    for item in items {
        writeln!(f, "{}", serde_json::to_string(item).expect("item"))?;
    }
    Ok(())
}

/// Lazy line-by-line corpus reader; the file is never held in memory as a
/// whole.
pub struct CorpusReader {
    lines: std::iter::Enumerate<std::io::Lines<BufReader<std::fs::File>>>,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines().enumerate();
        let (_, first) = lines.next().ok_or(DataError::MissingHeader)?;
        let header: CorpusHeader =
            serde_json::from_str(&first?).map_err(|_| DataError::MissingHeader)?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(DataError::Version {
                format: header.format,
                version: header.version,
            });
        }
        Ok(Self { lines })
    }
}

impl Iterator for CorpusReader {
    type Item = Result<CorpusItem>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (n, line) = self.lines.next()?;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str(&line).map_err(|e| DataError::Parse { line: n + 1, source: e }),
            );
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    CorpusReader::open(path)?.collect()
}

/// A compiled training example: input tokens, next-token targets, a loss
/// mask selecting answer positions, and the symbolic frames in the visible
/// window.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub inputs: Vec<TimedToken>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub frames: Vec<(Frame, f64)>,
    /// For each input position, the symbol id of the target when the target
    /// is a symbol word.
    pub target_symbols: Vec<Option<u32>>,
}

/// Frames sampled at 1 fps over the last `frame_cap` whole seconds ending
/// at `t_end`.
pub fn frame_window(item: &CorpusItem, frame_cap: usize) -> Vec<(Frame, f64)> {
    let end = item.t_end.floor() as i64;
    let start = (end - frame_cap as i64 + 1).max(0);
    (start..=end)
        .map(|s| {
            (
                Frame::Symbolic(symbol_at(&item.symbols, s as f64)),
                s as f64,
            )
        })
        .collect()
}

pub fn compile_item(
    vocab: &Vocab,
    item: &CorpusItem,
    decode_rate: f64,
    frame_cap: usize,
) -> Result<TrainingItem> {
    verify_item(vocab, item)?;
    let instruction = vocab.encode(&item.question)?;
    let mut answer = vocab.encode(&item.answer)?;
    answer.push(EOS);
    let tokens = assign_timestamps(&instruction, &answer, item.t_start, decode_rate)?;
    let n = tokens.len();
    let answer_start = instruction.len();
    let inputs = tokens[..n - 1].to_vec();
    let mut targets = Vec::with_capacity(n - 1);
    let mut loss_mask = Vec::with_capacity(n - 1);
    let mut target_symbols = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let t = tokens[i + 1].id;
        targets.push(t);
        loss_mask.push(i + 1 >= answer_start);
        target_symbols.push(vocab.token_symbol(t));
    }
    Ok(TrainingItem {
        inputs,
        targets,
        loss_mask,
        frames: frame_window(item, frame_cap),
        target_symbols,
    })
}
