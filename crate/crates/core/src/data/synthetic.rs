//! A desk-scale domain-shift translation task.
//!
//! Source sentences are uniform random token sequences. The baseline domain
//! translates each source token through a bijection `M₀` and swaps the first
//! two output tokens. The user domain uses `M₁`, which agrees with `M₀`
//! except on a chosen fraction of the vocabulary, where the images are
//! rotated among themselves.

use std::collections::BTreeSet;

use super::{ParallelCorpus, Vocabulary, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::model::Segment;
use crate::tensor::RandomSource;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    /// Content tokens per language, excluding the specials.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub baseline_size: usize,
    pub adapt_size: usize,
    pub test_size: usize,
    /// Held-out baseline-domain segments for measuring the baseline itself.
    pub heldout_size: usize,
    /// Fraction of the vocabulary whose translation differs in the user domain.
    pub shift_fraction: f64,
    /// Fraction of test positions that repeat an earlier test segment.
    pub repeat_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 120,
            min_len: 4,
            max_len: 12,
            baseline_size: 20_000,
            adapt_size: 2_000,
            test_size: 500,
            heldout_size: 500,
            shift_fraction: 0.3,
            repeat_fraction: 0.3,
            seed: 1,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("shift", self.shift_fraction),
            ("repeat", self.repeat_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{name} fraction {f} outside [0, 1]")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if [
            self.baseline_size,
            self.adapt_size,
            self.test_size,
            self.heldout_size,
        ]
        .contains(&0)
        {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.repeat_fraction >= 1.0 {
            return Err(Error::Config(
                "repeat fraction must leave at least one unique segment".into(),
            ));
        }
        Ok(())
    }

    /// Number of content tokens whose mapping changes.
    pub fn shifted_tokens(&self) -> usize {
        (self.shift_fraction * self.vocab_size as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// Baseline-domain training data.
    pub baseline: ParallelCorpus,
    /// Baseline-domain held-out data.
    pub heldout: ParallelCorpus,
    /// User-domain adaptation data.
    pub adapt: ParallelCorpus,
    /// User-domain test data, with repeats.
    pub test: ParallelCorpus,
    /// `M₀` over content indices.
    pub base_map: Vec<usize>,
    /// `M₁` over content indices.
    pub user_map: Vec<usize>,
}

const FIRST_CONTENT_ID: usize = SPECIAL_TOKENS.len();

fn sentence(rng: &mut RandomSource, cfg: &SyntheticTaskConfig) -> Vec<usize> {
    let len = rng.range_inclusive(cfg.min_len, cfg.max_len);
    (0..len).map(|_| rng.below(cfg.vocab_size)).collect()
}

/// Maps content indices through `map`, swaps the first two, and shifts to vocabulary ids.
fn translate(source: &[usize], map: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = source.iter().map(|&i| map[i] + FIRST_CONTENT_ID).collect();
    if out.len() >= 2 {
        out.swap(0, 1);
    }
    out
}

fn segment(source: &[usize], map: &[usize]) -> Segment {
    Segment {
        source: source.iter().map(|&i| i + FIRST_CONTENT_ID).collect(),
        target: translate(source, map),
    }
}

fn corpus(
    rng: &mut RandomSource,
    cfg: &SyntheticTaskConfig,
    n: usize,
    map: &[usize],
) -> ParallelCorpus {
    (0..n).map(|_| segment(&sentence(rng, cfg), map)).collect()
}

pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let mut rng = RandomSource::new(cfg.seed);

    let mut base_map: Vec<usize> = (0..v).collect();
    rng.shuffle(&mut base_map);

    let k = cfg.shifted_tokens();
    let mut chosen: Vec<usize> = (0..v).collect();
    rng.shuffle(&mut chosen);
    chosen.truncate(k);
    let mut user_map = base_map.clone();
    if k == 1 {
        // A single token cannot be permuted; send it to another token's image.
        let s = chosen[0];
        user_map[s] = base_map[(s + 1) % v];
    } else {
        for (j, &s) in chosen.iter().enumerate() {
            user_map[s] = base_map[chosen[(j + 1) % k]];
        }
    }

    let baseline = corpus(&mut rng.fork(1), cfg, cfg.baseline_size, &base_map);
    let heldout = corpus(&mut rng.fork(2), cfg, cfg.heldout_size, &base_map);
    let adapt = corpus(&mut rng.fork(3), cfg, cfg.adapt_size, &user_map);

    let mut trng = rng.fork(4);
    let n = cfg.test_size;
    let repeats = ((cfg.repeat_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut slots: Vec<usize> = (1..n).collect();
    trng.shuffle(&mut slots);
    let repeat_slots: BTreeSet<usize> = slots.into_iter().take(repeats).collect();
    let mut unique: Vec<Segment> = Vec::new();
    let mut test = Vec::with_capacity(n);
    for pos in 0..n {
        if repeat_slots.contains(&pos) {
            let earlier = unique[trng.below(unique.len())].clone();
            test.push(earlier);
        } else {
            let s = segment(&sentence(&mut trng, cfg), &user_map);
            unique.push(s.clone());
            test.push(s);
        }
    }

    let src_vocab = Vocabulary::new((0..v).map(|i| format!("s{i}")))?;
    let tgt_vocab = Vocabulary::new((0..v).map(|i| format!("t{i}")))?;
    Ok(SyntheticTask {
        src_vocab,
        tgt_vocab,
        baseline,
        heldout,
        adapt,
        test: ParallelCorpus::new(test)?,
        base_map,
        user_map,
    })
}
