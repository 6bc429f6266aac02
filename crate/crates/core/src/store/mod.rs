//! On-disk artifacts: token corpora, checkpoints, and the byte tokenizer.

pub mod checkpoint_io;
pub mod corpus;
pub mod tokenizer;

pub use checkpoint_io::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use corpus::{load_corpus, save_corpus, Corpus, CORPUS_MAGIC};
pub use tokenizer::{decode_bytes, encode_bytes, BYTE_VOCAB};
