//! Corpus BLEU and repetition rate.

mod bleu;
mod repetition;

pub use bleu::{bleu, BleuReport, MAX_ORDER};
pub use repetition::{repetition_rate, RepetitionRateReport, DEFAULT_WINDOW};
