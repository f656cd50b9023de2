//! Baseline training, corpus translation, and corpus-level scoring.

use crate::adapt::{max_decode_len, token_batches};
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::metrics::{bleu, BleuReport};
use crate::model::{greedy_decode, init_parameters, perplexity, ModelConfig, Segment};
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamConfig, AdamState, GradStore, ParameterSet, RandomSource};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTrainConfig {
    pub epochs: usize,
    pub batch_tokens: usize,
    pub lr: f64,
    /// Linear warmup steps before the learning rate reaches `lr`.
    pub warmup_steps: usize,
    pub dropout: f64,
    pub eps_ls: f64,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_tokens: 1000,
            lr: 3e-3,
            warmup_steps: 100,
            dropout: 0.1,
            eps_ls: 0.1,
            seed: 1,
        }
    }
}

/// Trains a fresh model with Adam; `on_epoch(epoch, mean_loss)` runs after every epoch.
pub fn train_baseline<F: Scalar>(
    corpus: &ParallelCorpus,
    model: &ModelConfig,
    cfg: &BaselineTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<ParameterSet<F>> {
    model.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if cfg.batch_tokens == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config(
            "baseline training needs a positive batch size and learning rate".into(),
        ));
    }
    corpus.validate(model.src_vocab, model.tgt_vocab)?;
    let root = RandomSource::new(cfg.seed);
    let mut params = init_parameters::<F>(model, &mut root.fork(0))?;
    let mut states: Vec<AdamState<F>> = params
        .iter()
        .map(|(_, t)| AdamState::for_tensor(t))
        .collect();
    let mut order_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let batches = token_batches(corpus.segments(), cfg.batch_tokens, &mut order_rng);
        let mut sum = 0.0;
        for batch in &batches {
            let segs: Vec<&Segment> = batch.iter().map(|&i| &corpus.segments()[i]).collect();
            let mut store = GradStore::all(&params);
            let loss = crate::adapt::batch_loss_and_grad(
                &params,
                model,
                &segs,
                cfg.eps_ls,
                cfg.dropout,
                &mut dropout_rng,
                &mut store,
            )?;
            step += 1;
            let warm = (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
            let adam = AdamConfig {
                lr: F::of(cfg.lr * warm),
                ..AdamConfig::default()
            };
            for (id, state) in states.iter_mut().enumerate() {
                let Some(grad) = store.take(id) else { continue };
                let p = params.by_index_mut(id);
                p.set_grad(grad)?;
                adam_step(p, state, &adam)?;
            }
            sum += loss.as_f64();
        }
        let mean = sum / batches.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("training loss became {mean}")));
        }
        on_epoch(epoch, mean);
    }
    Ok(params)
}

/// Greedy translations of every source in `corpus`.
pub fn translate_corpus<F: Scalar>(
    corpus: &ParallelCorpus,
    params: &ParameterSet<F>,
    model: &ModelConfig,
) -> Result<Vec<Vec<usize>>> {
    corpus
        .iter()
        .map(|s| greedy_decode(&s.source, params, model, max_decode_len(s.source.len())))
        .collect()
}

/// BLEU of greedy translations against the corpus targets.
pub fn corpus_bleu<F: Scalar>(
    corpus: &ParallelCorpus,
    params: &ParameterSet<F>,
    model: &ModelConfig,
) -> Result<BleuReport> {
    let hyps = translate_corpus(corpus, params, model)?;
    bleu(&hyps, &corpus.targets())
}

/// Token-weighted corpus perplexity.
pub fn corpus_perplexity<F: Scalar>(
    corpus: &ParallelCorpus,
    params: &ParameterSet<F>,
    model: &ModelConfig,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut labels = 0usize;
    for seg in corpus.iter() {
        let n = seg.target.len() + 1;
        nll += perplexity(seg, params, model)?.as_f64().ln() * n as f64;
        labels += n;
    }
    Ok((nll / labels as f64).exp())
}
