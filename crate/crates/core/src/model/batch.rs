//! Rectangular grids of token ids fed to the model.

use crate::error::{KanacError, Result};
use crate::model::config::ModelConfig;

/// A batch of `batch_size` sequences of `seq_len` token ids, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<u32>, batch_size: usize, seq_len: usize) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(KanacError::validation(
                "batch_size and seq_len must be >= 1".to_string(),
            ));
        }
        if tokens.len() != batch_size * seq_len {
            return Err(KanacError::validation(format!(
                "{} tokens cannot fill a {batch_size} x {seq_len} grid",
                tokens.len()
            )));
        }
        Ok(TokenBatch {
            tokens,
            batch_size,
            seq_len,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Checks the batch against a model's vocabulary and context limits.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if self.seq_len > config.max_seq_len {
            return Err(KanacError::domain(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq_len, config.max_seq_len
            )));
        }
        for (i, &id) in self.tokens.iter().enumerate() {
            if id as usize >= config.vocab_size {
                return Err(KanacError::domain(format!(
                    "token id {id} at flat index {i} is outside vocab_size {}",
                    config.vocab_size
                )));
            }
        }
        Ok(())
    }
}
