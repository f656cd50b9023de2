//! Batch and incremental SGD over offsets of a frozen baseline.

use std::collections::{BTreeSet, HashSet};

use super::config::{AdaptMode, AdaptationConfig};
use super::lasso::{add_subgradient, clip_offsets, GroupLassoConfig};
use super::offsets::{compose, OffsetEntry, OffsetSet};
use super::selection::restrict_rows;
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{
    greedy_decode, perplexity, segment_loss_graph, Mode, ModelConfig, Segment, BOS, EOS,
    OUTPUT_PROJECTION, SRC_EMBEDDING, TGT_EMBEDDING,
};
use crate::scalar::Scalar;
use crate::tensor::{sgd_step, GradStore, Graph, ParameterSet, RandomSource, Tensor};

/// Longest translation produced for a source of `src_len` tokens.
pub fn max_decode_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Splits a shuffled order of `segments` into consecutive batches of at most
/// `budget` source+target tokens. A segment larger than the budget gets a batch of its own.
pub fn token_batches(
    segments: &[Segment],
    budget: usize,
    rng: &mut RandomSource,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..segments.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = segments[i].num_tokens();
        if !current.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Token-weighted mean loss over `batch`, with gradients accumulated into `store`.
pub(crate) fn batch_loss_and_grad<F: Scalar>(
    params: &ParameterSet<F>,
    model: &ModelConfig,
    batch: &[&Segment],
    eps_ls: f64,
    dropout: f64,
    rng: &mut RandomSource,
    store: &mut GradStore<F>,
) -> Result<F> {
    let labels: usize = batch.iter().map(|s| s.target.len() + 1).sum();
    let mut total = F::zero();
    for seg in batch {
        let weight = F::of_usize(seg.target.len() + 1) / F::of_usize(labels);
        let mut g = Graph::new(params);
        let mut mode = if dropout > 0.0 {
            Mode::train(dropout, rng)
        } else {
            Mode::Eval
        };
        let loss = segment_loss_graph(&mut g, seg, model, eps_ls, &mut mode)?;
        let scaled = g.scale(loss, weight);
        g.backward(scaled, store)?;
        total = total + g.scalar(scaled);
    }
    Ok(total)
}

/// Updates performed on one incremental segment and the perplexity after each.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStats {
    pub updates: usize,
    pub perplexities: Vec<f64>,
}

/// Runs `update` (one SGD step returning the perplexity afterwards) at least once
/// and at most `max_updates` times, stopping once perplexity ≤ `ppl_stop`.
pub fn run_update_schedule(
    max_updates: usize,
    ppl_stop: f64,
    mut update: impl FnMut() -> Result<f64>,
) -> Result<SegmentStats> {
    let mut perplexities = Vec::new();
    for _ in 0..max_updates.max(1) {
        let ppl = update()?;
        perplexities.push(ppl);
        if ppl <= ppl_stop {
            break;
        }
    }
    Ok(SegmentStats {
        updates: perplexities.len(),
        perplexities,
    })
}

#[derive(Debug, Clone)]
pub struct IncrementalOutcome<F> {
    pub translations: Vec<Vec<usize>>,
    pub offsets: OffsetSet<F>,
    pub stats: Vec<SegmentStats>,
}

/// Working state of one adaptation run: dense offsets for trainable tensors
/// and the composed parameters they imply.
struct OffsetTrainer<'a, F: Scalar> {
    baseline: &'a ParameterSet<F>,
    model: &'a ModelConfig,
    cfg: &'a AdaptationConfig,
    initial: OffsetSet<F>,
    trainable: HashSet<String>,
    deltas: Vec<Option<Tensor<F>>>,
    /// Rows trained and kept at export for vocabulary-indexed tensors under `sparse_vocab`.
    kept_rows: Vec<Option<BTreeSet<usize>>>,
    effective: ParameterSet<F>,
    rng: RandomSource,
}

impl<'a, F: Scalar> OffsetTrainer<'a, F> {
    fn new(
        baseline: &'a ParameterSet<F>,
        model: &'a ModelConfig,
        initial: OffsetSet<F>,
        cfg: &'a AdaptationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let effective = compose(baseline, &initial)?;
        let mut trainable = HashSet::new();
        let mut deltas = Vec::with_capacity(baseline.len());
        let mut kept_rows = Vec::with_capacity(baseline.len());
        for (id, (name, t)) in baseline.iter().enumerate() {
            let train = cfg.is_trainable(name, model)?;
            let entry = initial.entry(id);
            deltas.push(if train {
                Some(entry.to_dense(t.shape())?)
            } else {
                None
            });
            let vocab = matches!(name, SRC_EMBEDDING | TGT_EMBEDDING | OUTPUT_PROJECTION);
            kept_rows.push(match entry {
                _ if !(train && vocab) => None,
                OffsetEntry::Zero => Some(BTreeSet::new()),
                OffsetEntry::SparseRows(s) => Some(s.row_ids().iter().copied().collect()),
                OffsetEntry::Dense(_) => Some((0..t.rows()).collect()),
            });
            if train {
                trainable.insert(name.to_string());
            }
        }
        Ok(Self {
            baseline,
            model,
            cfg,
            initial,
            trainable,
            deltas,
            kept_rows,
            effective,
            rng: RandomSource::new(cfg.seed),
        })
    }

    fn observe(&mut self, batch: &[&Segment]) {
        for name in [SRC_EMBEDDING, TGT_EMBEDDING, OUTPUT_PROJECTION] {
            let Some(id) = self.baseline.index_of(name) else {
                continue;
            };
            let Some(rows) = self.kept_rows[id].as_mut() else {
                continue;
            };
            for seg in batch {
                if name == SRC_EMBEDDING {
                    rows.extend(seg.source.iter().copied());
                } else {
                    rows.extend(seg.target.iter().copied());
                    rows.extend([BOS, EOS]);
                }
            }
        }
    }

    /// One SGD update on `batch`; returns the mean training loss before the update.
    fn step(&mut self, batch: &[&Segment]) -> Result<f64> {
        self.observe(batch);
        let mut store = GradStore::select(&self.effective, |n| self.trainable.contains(n));
        let loss = batch_loss_and_grad(
            &self.effective,
            self.model,
            batch,
            self.cfg.effective_eps_ls(),
            self.cfg.effective_dropout(),
            &mut self.rng,
            &mut store,
        )?;
        let lr = F::of(self.cfg.lr);
        for id in 0..self.deltas.len() {
            let Some(delta) = self.deltas[id].as_mut() else {
                continue;
            };
            let mut grad = store
                .take(id)
                .unwrap_or_else(|| vec![F::zero(); delta.len()]);
            if let Some(l) = &self.cfg.lasso {
                add_subgradient(
                    &mut grad,
                    delta.values(),
                    delta.len(),
                    l.lambda,
                    l.norm_floor,
                );
            }
            if let (true, Some(rows)) = (self.cfg.sparse_vocab, &self.kept_rows[id]) {
                let width = delta.cols();
                for (i, chunk) in grad.chunks_mut(width).enumerate() {
                    if !rows.contains(&i) {
                        chunk.iter_mut().for_each(|g| *g = F::zero());
                    }
                }
            }
            delta.set_grad(grad)?;
            sgd_step(delta, lr)?;
            let base = self.baseline.by_index(id).values();
            for ((w, &b), &d) in self
                .effective
                .by_index_mut(id)
                .values_mut()
                .iter_mut()
                .zip(base)
                .zip(delta.values())
            {
                *w = b + d;
            }
        }
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("adaptation loss became {loss}")));
        }
        Ok(loss)
    }

    fn translate(&self, source: &[usize]) -> Result<Vec<usize>> {
        greedy_decode(
            source,
            &self.effective,
            self.model,
            max_decode_len(source.len()),
        )
    }

    fn finish(self) -> Result<OffsetSet<F>> {
        let mut out = self.initial;
        for (id, delta) in self.deltas.into_iter().enumerate() {
            let Some(delta) = delta else { continue };
            let name = self.baseline.name(id);
            let mut entry = if delta.values().iter().all(|v| v.is_zero()) {
                OffsetEntry::Zero
            } else {
                OffsetEntry::Dense(delta)
            };
            if let (true, Some(rows)) = (self.cfg.sparse_vocab, &self.kept_rows[id]) {
                entry = restrict_rows(&entry, rows)?;
            }
            out.set(name, entry)?;
        }
        match &self.cfg.lasso {
            Some(l) => clip_offsets(&out, l),
            None => Ok(out),
        }
    }
}

fn require_mode(cfg: &AdaptationConfig, mode: AdaptMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "expected {mode:?} mode, got {:?}",
            cfg.mode
        )));
    }
    Ok(())
}

/// Batch fine-tuning of offsets on an adaptation corpus.
pub fn batch_adapt<F: Scalar>(
    baseline: &ParameterSet<F>,
    model: &ModelConfig,
    corpus: &ParallelCorpus,
    cfg: &AdaptationConfig,
) -> Result<OffsetSet<F>> {
    batch_adapt_from(
        baseline,
        model,
        OffsetSet::zeros_for(baseline),
        corpus,
        cfg,
        |_, _| {},
    )
}

/// Batch fine-tuning starting from existing offsets; `on_epoch(epoch, mean_loss)`
/// is called after every epoch.
pub fn batch_adapt_from<F: Scalar>(
    baseline: &ParameterSet<F>,
    model: &ModelConfig,
    initial: OffsetSet<F>,
    corpus: &ParallelCorpus,
    cfg: &AdaptationConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<OffsetSet<F>> {
    require_mode(cfg, AdaptMode::Batch)?;
    if corpus.is_empty() {
        return Err(Error::Data("adaptation corpus is empty".into()));
    }
    corpus.validate(model.src_vocab, model.tgt_vocab)?;
    let mut trainer = OffsetTrainer::new(baseline, model, initial, cfg)?;
    let mut order_rng = RandomSource::new(cfg.seed).fork(1);
    for epoch in 0..cfg.epochs {
        let batches = token_batches(corpus.segments(), cfg.batch_tokens, &mut order_rng);
        let mut sum = 0.0;
        for batch in &batches {
            let segs: Vec<&Segment> = batch.iter().map(|&i| &corpus.segments()[i]).collect();
            sum += trainer.step(&segs)?;
        }
        on_epoch(epoch, sum / batches.len() as f64);
    }
    trainer.finish()
}

/// Translate, then learn from the reference, one segment at a time.
pub fn incremental_adapt<F: Scalar>(
    baseline: &ParameterSet<F>,
    model: &ModelConfig,
    offsets: OffsetSet<F>,
    test: &ParallelCorpus,
    cfg: &AdaptationConfig,
) -> Result<IncrementalOutcome<F>> {
    require_mode(cfg, AdaptMode::Incremental)?;
    if test.is_empty() {
        return Err(Error::Data("test corpus is empty".into()));
    }
    test.validate(model.src_vocab, model.tgt_vocab)?;
    let mut trainer = OffsetTrainer::new(baseline, model, offsets, cfg)?;
    let mut translations = Vec::with_capacity(test.len());
    let mut stats = Vec::with_capacity(test.len());
    for seg in test.iter() {
        translations.push(trainer.translate(&seg.source)?);
        let segment_stats = run_update_schedule(cfg.max_updates_per_segment, cfg.ppl_stop, || {
            trainer.step(&[seg])?;
            Ok(perplexity(seg, &trainer.effective, model)?.as_f64())
        })?;
        stats.push(segment_stats);
    }
    Ok(IncrementalOutcome {
        translations,
        offsets: trainer.finish()?,
        stats,
    })
}

/// Batch adaptation followed by incremental adaptation with the same selection.
pub fn combined_adapt<F: Scalar>(
    baseline: &ParameterSet<F>,
    model: &ModelConfig,
    adapt: &ParallelCorpus,
    test: &ParallelCorpus,
    batch_cfg: &AdaptationConfig,
) -> Result<IncrementalOutcome<F>> {
    let offsets = batch_adapt(baseline, model, adapt, batch_cfg)?;
    incremental_adapt(baseline, model, offsets, test, &batch_cfg.to_incremental())
}

/// Mean token loss of `compose(baseline, deltas)` on `segments` plus the lasso
/// penalty, and its gradient with respect to every offset. Deterministic (no dropout).
pub fn adaptation_objective<F: Scalar>(
    baseline: &ParameterSet<F>,
    model: &ModelConfig,
    deltas: &ParameterSet<F>,
    segments: &[Segment],
    eps_ls: f64,
    lasso: Option<&GroupLassoConfig>,
) -> Result<(F, ParameterSet<F>)> {
    if !baseline.same_layout(deltas) {
        return Err(Error::dim("offsets do not match the baseline layout"));
    }
    let mut effective = baseline.clone();
    for (id, (_, d)) in deltas.iter().enumerate() {
        for (w, &u) in effective
            .by_index_mut(id)
            .values_mut()
            .iter_mut()
            .zip(d.values())
        {
            *w = *w + u;
        }
    }
    let mut store = GradStore::all(&effective);
    let batch: Vec<&Segment> = segments.iter().collect();
    let mut value = batch_loss_and_grad(
        &effective,
        model,
        &batch,
        eps_ls,
        0.0,
        &mut RandomSource::new(0),
        &mut store,
    )?;
    let mut grads = store.to_parameter_set(&effective);
    if let Some(l) = lasso {
        for (id, (_, d)) in deltas.iter().enumerate() {
            let size = d.len();
            value = value + F::of(l.lambda) * F::of_usize(size).sqrt() * d.l2_norm();
            add_subgradient(
                grads.by_index_mut(id).values_mut(),
                d.values(),
                size,
                l.lambda,
                l.norm_floor,
            );
        }
    }
    Ok((value, grads))
}
