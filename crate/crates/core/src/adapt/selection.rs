//! Choosing which tensors to adapt, and restricting vocabulary-sized offsets
//! to the rows a corpus actually uses.

use std::collections::BTreeSet;

use super::offsets::{OffsetEntry, OffsetSet, SparseRows};
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{OUTPUT_PROJECTION, SRC_EMBEDDING, TGT_EMBEDDING};
use crate::scalar::Scalar;

/// Names of tensors whose mean absolute offset exceeds `threshold`.
pub fn select_fixed_tensors<F: Scalar>(
    offsets: &OffsetSet<F>,
    threshold: f64,
) -> Result<BTreeSet<String>> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::Config(format!(
            "selection threshold must be ≥ 0, got {threshold}"
        )));
    }
    let t = F::of(threshold);
    Ok((0..offsets.len())
        .filter(|&id| offsets.entry(id).mean_abs(offsets.size_of(id)) > t)
        .map(|id| offsets.name(id).to_string())
        .collect())
}

/// Keeps only `rows` of a matrix offset entry. Dense becomes SparseRows;
/// SparseRows is intersected; Zero stays Zero.
pub fn restrict_rows<F: Scalar>(
    entry: &OffsetEntry<F>,
    rows: &BTreeSet<usize>,
) -> Result<OffsetEntry<F>> {
    Ok(match entry {
        OffsetEntry::Zero => OffsetEntry::Zero,
        OffsetEntry::Dense(t) => {
            if t.shape().len() != 2 {
                return Err(Error::dim("row restriction needs a matrix offset"));
            }
            OffsetEntry::SparseRows(SparseRows::from_dense(t, rows)?)
        }
        OffsetEntry::SparseRows(s) => {
            let mut ids = Vec::new();
            let mut values = Vec::new();
            for (k, &i) in s.row_ids().iter().enumerate() {
                if rows.contains(&i) {
                    ids.push(i);
                    values.extend_from_slice(s.row(k));
                }
            }
            OffsetEntry::SparseRows(SparseRows::new(ids, s.width(), values)?)
        }
    })
}

/// Restricts the named vocabulary-indexed tensors to rows observed in `corpus`.
/// The source embedding uses source ids; the target embedding and output
/// projection use target ids plus BOS and EOS.
pub fn restrict_tensors_to_observed_vocab<F: Scalar>(
    offsets: &OffsetSet<F>,
    corpus: &ParallelCorpus,
    names: &[&str],
) -> Result<OffsetSet<F>> {
    let src = corpus.observed_source_ids();
    let tgt = corpus.observed_target_ids();
    let mut out = offsets.clone();
    for &name in names {
        let rows = match name {
            SRC_EMBEDDING => &src,
            TGT_EMBEDDING | OUTPUT_PROJECTION => &tgt,
            other => {
                return Err(Error::Config(format!(
                    "`{other}` is not indexed by vocabulary"
                )))
            }
        };
        let entry = offsets
            .get(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))?;
        out.set(name, restrict_rows(entry, rows)?)?;
    }
    Ok(out)
}

/// Restricts all three vocabulary-indexed tensors.
pub fn restrict_to_observed_vocab<F: Scalar>(
    offsets: &OffsetSet<F>,
    corpus: &ParallelCorpus,
) -> Result<OffsetSet<F>> {
    restrict_tensors_to_observed_vocab(
        offsets,
        corpus,
        &[SRC_EMBEDDING, TGT_EMBEDDING, OUTPUT_PROJECTION],
    )
}
