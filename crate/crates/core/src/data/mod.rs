//! Vocabularies, whitespace tokenization, parallel corpora on disk, and the
//! synthetic domain-shift task generator.

mod corpus;
mod synthetic;
mod vocab;

pub use corpus::{load_parallel, write_parallel, ParallelCorpus};
pub use synthetic::{generate_synthetic, SyntheticTask, SyntheticTaskConfig};
pub use vocab::{tokenize, Vocabulary, SPECIAL_TOKENS};
