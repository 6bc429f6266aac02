//! Tokenized corpora stored as flat id files and served as fixed windows.
//!
//! File layout: 8-byte magic "KANATOKS", u32 vocab_size, u64 token count,
//! then the ids as little-endian u32 values.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{KanacError, Result};
use crate::model::batch::TokenBatch;

pub const CORPUS_MAGIC: &[u8; 8] = b"KANATOKS";

/// A fully loaded token file plus the window length used for batching.
/// Window `i` covers tokens `[i*(seq_len+1), (i+1)*(seq_len+1))`: `seq_len`
/// inputs and the same span shifted by one as targets.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub path: PathBuf,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    /// Hex digest of the raw file bytes, recorded by importance reports.
    pub digest: String,
}

fn digest_of(vocab_size: usize, tokens: &[u32]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(CORPUS_MAGIC);
    hasher.update((vocab_size as u32).to_le_bytes());
    hasher.update((tokens.len() as u64).to_le_bytes());
    for &t in tokens {
        hasher.update(t.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn check_tokens(vocab_size: usize, seq_len: usize, tokens: &[u32]) -> Result<()> {
    if seq_len == 0 {
        return Err(KanacError::validation("seq_len must be >= 1".to_string()));
    }
    for (offset, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab_size {
            return Err(KanacError::validation(format!(
                "token id {id} at offset {offset} exceeds vocab_size {vocab_size}"
            )));
        }
    }
    if tokens.len() < seq_len + 1 {
        return Err(KanacError::validation(format!(
            "corpus holds {} tokens, need at least seq_len + 1 = {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    Ok(())
}

impl Corpus {
    /// In-memory corpus with the same invariants as a loaded file.
    pub fn from_tokens(vocab_size: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        check_tokens(vocab_size, seq_len, &tokens)?;
        let digest = digest_of(vocab_size, &tokens);
        Ok(Corpus {
            path: PathBuf::new(),
            vocab_size,
            seq_len,
            tokens,
            digest,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.tokens.len() / (self.seq_len + 1)
    }

    /// The `i`-th non-overlapping window of seq_len + 1 tokens, in file order.
    pub fn window(&self, i: usize) -> &[u32] {
        let w = self.seq_len + 1;
        &self.tokens[i * w..(i + 1) * w]
    }

    /// Stacks the given windows into an input batch and its shifted targets.
    pub fn batch(&self, windows: &[usize]) -> Result<(TokenBatch, Vec<u32>)> {
        if windows.is_empty() {
            return Err(KanacError::validation("empty window set".to_string()));
        }
        let n = self.n_windows();
        let mut inputs = Vec::with_capacity(windows.len() * self.seq_len);
        let mut targets = Vec::with_capacity(windows.len() * self.seq_len);
        for &w in windows {
            if w >= n {
                return Err(KanacError::validation(format!(
                    "window {w} out of range, corpus has {n}"
                )));
            }
            let span = self.window(w);
            inputs.extend_from_slice(&span[..self.seq_len]);
            targets.extend_from_slice(&span[1..]);
        }
        Ok((
            TokenBatch::new(inputs, windows.len(), self.seq_len)?,
            targets,
        ))
    }
}

/// Writes a token file in the corpus layout.
pub fn save_corpus(path: &Path, vocab_size: usize, tokens: &[u32]) -> Result<()> {
    if vocab_size == 0 || vocab_size > u32::MAX as usize {
        return Err(KanacError::validation(format!(
            "vocab_size {vocab_size} does not fit the header"
        )));
    }
    let mut bytes = Vec::with_capacity(20 + tokens.len() * 4);
    bytes.extend_from_slice(CORPUS_MAGIC);
    bytes.extend_from_slice(&(vocab_size as u32).to_le_bytes());
    bytes.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for &t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a token file and validates every id against its declared vocabulary.
pub fn load_corpus(path: &Path, seq_len: usize) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(KanacError::format(format!(
            "{} is too short to hold a corpus header",
            path.display()
        )));
    }
    if &bytes[..8] != CORPUS_MAGIC {
        return Err(KanacError::format(format!(
            "{} does not start with the corpus magic",
            path.display()
        )));
    }
    let vocab_size = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() != 20 + count * 4 {
        return Err(KanacError::format(format!(
            "{} declares {count} tokens but holds {} payload bytes",
            path.display(),
            bytes.len() - 20
        )));
    }
    let tokens: Vec<u32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    check_tokens(vocab_size, seq_len, &tokens)?;
    let digest = digest_of(vocab_size, &tokens);
    Ok(Corpus {
        path: path.to_path_buf(),
        vocab_size,
        seq_len,
        tokens,
        digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_non_overlapping_in_file_order() {
        let corpus = Corpus::from_tokens(256, 4, (0..10).collect()).unwrap();
        assert_eq!(corpus.n_windows(), 2);
        assert_eq!(corpus.window(0), &[0, 1, 2, 3, 4]);
        assert_eq!(corpus.window(1), &[5, 6, 7, 8, 9]);

        let (batch, targets) = corpus.batch(&[0, 1]).unwrap();
        assert_eq!(batch.row(0), &[0, 1, 2, 3]);
        assert_eq!(batch.row(1), &[5, 6, 7, 8]);
        assert_eq!(targets, vec![1, 2, 3, 4, 6, 7, 8, 9]);
    }

    #[test]
    fn rejects_out_of_vocab_id_with_offset() {
        let err = Corpus::from_tokens(256, 2, vec![1, 2, 300, 4]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("300") && msg.contains("offset 2"), "{msg}");
    }

    #[test]
    fn rejects_too_few_tokens() {
        assert!(Corpus::from_tokens(256, 4, vec![1, 2, 3]).is_err());
    }

    #[test]
    fn file_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.toks");
        let tokens: Vec<u32> = (0..23).map(|i| i * 7 % 256).collect();
        save_corpus(&path, 256, &tokens).unwrap();

        let a = load_corpus(&path, 4).unwrap();
        let b = load_corpus(&path, 4).unwrap();
        assert_eq!(a.tokens, tokens);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.vocab_size, 256);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toks");

        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load_corpus(&path, 2), Err(KanacError::Format(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(CORPUS_MAGIC);
        bytes.extend_from_slice(&256u32.to_le_bytes());
        bytes.extend_from_slice(&10u64.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_corpus(&path, 2), Err(KanacError::Format(_))));
    }
}
