//! Corpus loading, vocabularies and contiguous batching for truncated BPTT.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// End-of-line marker appended in word mode.
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    /// Whitespace-separated words plus `<eos>` per line.
    Word,
    /// One token per character, newlines included.
    Char,
}

/// What to do with tokens missing from the training vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnkPolicy {
    /// Unknown tokens are an error.
    Forbid,
    /// Map unknowns to this token, adding it to the vocabulary if the
    /// training split does not already contain it.
    Token(String),
}

impl Default for UnkPolicy {
    fn default() -> Self {
        UnkPolicy::Token(UNK.to_string())
    }
}

pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Word => text
            .lines()
            .flat_map(|line| line.split_whitespace().map(str::to_string).chain(std::iter::once(EOS.to_string())))
            .collect(),
        TokenMode::Char => text.chars().map(String::from).collect(),
    }
}

/// Token ↔ id mapping. Ids follow first appearance in the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: Option<u32>,
}

impl Vocabulary {
    pub fn build(train_tokens: &[String], policy: &UnkPolicy) -> Result<Self> {
        if train_tokens.is_empty() {
            return Err(Error::validation("cannot build a vocabulary from an empty corpus"));
        }
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for t in train_tokens {
            if !index.contains_key(t) {
                index.insert(t.clone(), tokens.len() as u32);
                tokens.push(t.clone());
            }
        }
        let unk = match policy {
            UnkPolicy::Forbid => None,
            UnkPolicy::Token(marker) => Some(*index.entry(marker.clone()).or_insert_with(|| {
                tokens.push(marker.clone());
                (tokens.len() - 1) as u32
            })),
        };
        Ok(Self { tokens, index, unk })
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, unk: Option<u32>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        if let Some(u) = unk {
            if u as usize >= tokens.len() {
                return Err(Error::Format(format!("unknown-token id {u} out of range")));
            }
        }
        Ok(Self { tokens, index, unk })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk(&self) -> Option<u32> {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<u32>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .or(self.unk)
                    .ok_or_else(|| Error::validation(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().filter_map(|&i| self.token(i)).collect()
    }
}

/// Id streams for the three splits, encoded with the training vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

impl Corpus {
    pub fn from_texts(train: &str, valid: &str, test: &str, mode: TokenMode, policy: &UnkPolicy) -> Result<Self> {
        let train_tokens = tokenize(train, mode);
        let vocab = Vocabulary::build(&train_tokens, policy)?;
        Ok(Self {
            train: vocab.encode(&train_tokens)?,
            valid: vocab.encode(&tokenize(valid, mode))?,
            test: vocab.encode(&tokenize(test, mode))?,
            vocab,
        })
    }

    pub fn load(train: &Path, valid: &Path, test: &Path, mode: TokenMode, policy: &UnkPolicy) -> Result<Self> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|e| Error::validation(format!("cannot read {}: {e}", p.display())))
        };
        Self::from_texts(&read(train)?, &read(valid)?, &read(test)?, mode, policy)
    }
}

/// One BPTT window: `seq_len × batch_size` inputs and next-token targets, row-major by time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub seq_len: usize,
    pub batch_size: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl SequenceBatch {
    /// Input ids at step `t`, one per column.
    pub fn input_row(&self, t: usize) -> Vec<usize> {
        self.inputs[t * self.batch_size..(t + 1) * self.batch_size]
            .iter()
            .map(|&i| i as usize)
            .collect()
    }

    pub fn input(&self, t: usize, b: usize) -> u32 {
        self.inputs[t * self.batch_size + b]
    }

    pub fn target(&self, t: usize, b: usize) -> u32 {
        self.targets[t * self.batch_size + b]
    }

    pub fn positions(&self) -> usize {
        self.seq_len * self.batch_size
    }
}

/// Splits `stream` into `batch_size` contiguous columns and cuts them into
/// windows of at most `bptt_len` steps.
///
/// The ragged tail beyond `batch_size·⌊len/batch_size⌋` is dropped. Column
/// `b` holds tokens `[b·L, (b+1)·L)`; a window starting at step `t` uses
/// tokens `t..t+seq_len` as inputs and `t+1..t+seq_len+1` as targets. A
/// final short window is kept when it has at least one step.
pub fn batchify(stream: &[u32], batch_size: usize, bptt_len: usize) -> Result<Vec<SequenceBatch>> {
    if batch_size == 0 || bptt_len == 0 {
        return Err(Error::validation("batch size and BPTT length must be positive"));
    }
    let column = stream.len() / batch_size;
    if column < 2 {
        return Err(Error::validation(format!(
            "stream of {} tokens is too short for {batch_size} columns of at least 2 tokens",
            stream.len()
        )));
    }
    let at = |t: usize, b: usize| stream[b * column + t];
    let mut batches = Vec::new();
    let mut start = 0;
    while start + 1 < column {
        let seq_len = bptt_len.min(column - 1 - start);
        let mut inputs = Vec::with_capacity(seq_len * batch_size);
        let mut targets = Vec::with_capacity(seq_len * batch_size);
        for t in start..start + seq_len {
            for b in 0..batch_size {
                inputs.push(at(t, b));
                targets.push(at(t + 1, b));
            }
        }
        batches.push(SequenceBatch {
            seq_len,
            batch_size,
            inputs,
            targets,
        });
        start += seq_len;
    }
    Ok(batches)
}

const ID_CACHE_MAGIC: &[u8; 8] = b"RRNNIDS\0";
const ID_CACHE_VERSION: u32 = 1;

/// Writes `ids` as: magic `RRNNIDS\0`, u32 version, u32 vocabulary size,
/// u64 count, then `count` u32 ids; all little-endian.
pub fn write_id_cache(path: &Path, vocab_size: u32, ids: &[u32]) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
        return Err(Error::validation(format!("id {bad} >= vocabulary size {vocab_size}")));
    }
    let mut buf = Vec::with_capacity(24 + 4 * ids.len());
    buf.extend_from_slice(ID_CACHE_MAGIC);
    buf.extend_from_slice(&ID_CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&vocab_size.to_le_bytes());
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a file written by [`write_id_cache`], returning `(vocab_size, ids)`.
pub fn read_id_cache(path: &Path) -> Result<(u32, Vec<u32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != ID_CACHE_MAGIC {
        return Err(Error::Format("not an id cache (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != ID_CACHE_VERSION {
        return Err(Error::Format(format!("unsupported id cache version {version}")));
    }
    let vocab = u32_at(12);
    let count = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 24 + 4 * count {
        return Err(Error::Format(format!(
            "id cache declares {count} ids but holds {} bytes of payload",
            bytes.len() - 24
        )));
    }
    let ids: Vec<u32> = (0..count).map(|i| u32_at(24 + 4 * i)).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Format(format!("id {bad} >= declared vocabulary {vocab}")));
    }
    Ok((vocab, ids))
}
