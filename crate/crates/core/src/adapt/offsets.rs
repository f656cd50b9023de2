//! Offset tensors: the entire personalized state, stored as differences from
//! a frozen baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::model::{region_of, ModelConfig, Region};
use crate::scalar::Scalar;
use crate::tensor::{ParameterSet, Tensor};

/// A subset of rows of a matrix offset; all other rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows<F> {
    row_ids: Vec<usize>,
    width: usize,
    values: Vec<F>,
}

impl<F: Scalar> SparseRows<F> {
    /// `row_ids` must be strictly increasing; `values` holds the rows back to back.
    pub fn new(row_ids: Vec<usize>, width: usize, values: Vec<F>) -> Result<Self> {
        if width == 0 || values.len() != row_ids.len() * width {
            return Err(Error::dim(format!(
                "{} sparse rows of width {width} need {} values, got {}",
                row_ids.len(),
                row_ids.len() * width,
                values.len()
            )));
        }
        if row_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(
                "sparse row ids must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            row_ids,
            width,
            values,
        })
    }

    /// Keeps the listed rows of a dense matrix offset.
    pub fn from_dense(dense: &Tensor<F>, rows: &BTreeSet<usize>) -> Result<Self> {
        let (r, c) = (dense.rows(), dense.cols());
        let ids: Vec<usize> = rows.iter().copied().filter(|&i| i < r).collect();
        let mut values = Vec::with_capacity(ids.len() * c);
        for &i in &ids {
            values.extend_from_slice(dense.row(i));
        }
        Self::new(ids, c, values)
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[F] {
        &self.values[k * self.width..(k + 1) * self.width]
    }

    pub fn to_dense(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let mut t = Tensor::zeros(shape.to_vec())?;
        for (k, &i) in self.row_ids.iter().enumerate() {
            t.row_mut(i).copy_from_slice(self.row(k));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OffsetEntry<F> {
    Zero,
    Dense(Tensor<F>),
    SparseRows(SparseRows<F>),
}

impl<F: Scalar> OffsetEntry<F> {
    pub fn is_zero(&self) -> bool {
        matches!(self, OffsetEntry::Zero)
    }

    /// Stored parameters: full size for dense, rows × width for sparse, nothing for zero.
    pub fn stored_params(&self) -> usize {
        match self {
            OffsetEntry::Zero => 0,
            OffsetEntry::Dense(t) => t.len(),
            OffsetEntry::SparseRows(s) => s.values.len(),
        }
    }

    /// The stored offset values (the implicit zeros are not included).
    pub fn stored_values(&self) -> &[F] {
        match self {
            OffsetEntry::Zero => &[],
            OffsetEntry::Dense(t) => t.values(),
            OffsetEntry::SparseRows(s) => &s.values,
        }
    }

    /// Euclidean norm over all entries of the offset tensor.
    pub fn l2_norm(&self) -> F {
        self.stored_values()
            .iter()
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt()
    }

    /// `(1/|T|) Σ |Δτ|` over the full tensor of `size` entries.
    pub fn mean_abs(&self, size: usize) -> F {
        self.stored_values().iter().map(|v| v.abs()).sum::<F>() / F::of_usize(size)
    }

    pub fn to_dense(&self, shape: &[usize]) -> Result<Tensor<F>> {
        match self {
            OffsetEntry::Zero => Tensor::zeros(shape.to_vec()),
            OffsetEntry::Dense(t) => Ok(t.clone()),
            OffsetEntry::SparseRows(s) => s.to_dense(shape),
        }
    }

    fn check_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        match self {
            OffsetEntry::Zero => Ok(()),
            OffsetEntry::Dense(t) if t.shape() == shape => Ok(()),
            OffsetEntry::Dense(t) => Err(Error::dim(format!(
                "offset `{name}` has shape {:?}, baseline has {shape:?}",
                t.shape()
            ))),
            OffsetEntry::SparseRows(s) => {
                let (rows, width) = match shape {
                    [r, c] => (*r, *c),
                    _ => return Err(Error::dim(format!("sparse rows for non-matrix `{name}`"))),
                };
                if s.width != width {
                    return Err(Error::dim(format!(
                        "sparse rows of `{name}` have width {}, baseline has {width}",
                        s.width
                    )));
                }
                if let Some(&last) = s.row_ids.last() {
                    if last >= rows {
                        return Err(Error::Index {
                            index: last,
                            size: rows,
                        });
                    }
                }
                Ok(())
            }
        }
    }
}

/// One offset entry per baseline tensor, in baseline order.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSet<F> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    entries: Vec<OffsetEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> OffsetSet<F> {
    /// All-zero offsets matching `baseline`'s names and shapes.
    pub fn zeros_for(baseline: &ParameterSet<F>) -> Self {
        let names: Vec<String> = baseline.names().map(str::to_string).collect();
        let shapes = baseline.iter().map(|(_, t)| t.shape().to_vec()).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            entries: vec![OffsetEntry::Zero; names.len()],
            names,
            shapes,
            index,
        }
    }

    /// Offsets over an explicit layout; used when reading files.
    pub fn from_layout(layout: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (n, _)) in layout.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate offset name `{n}`")));
            }
        }
        let (names, shapes): (Vec<_>, Vec<_>) = layout.into_iter().unzip();
        Ok(Self {
            entries: vec![OffsetEntry::Zero; names.len()],
            names,
            shapes,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&OffsetEntry<F>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.index_of(name).map(|i| self.shapes[i].as_slice())
    }

    pub fn entry(&self, id: usize) -> &OffsetEntry<F> {
        &self.entries[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn shape_of(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn size_of(&self, id: usize) -> usize {
        self.shapes[id].iter().product()
    }

    /// Replaces one entry after checking it against the tensor's shape.
    pub fn set(&mut self, name: &str, entry: OffsetEntry<F>) -> Result<()> {
        let id = self
            .index_of(name)
            .ok_or_else(|| Error::Lookup(name.to_string()))?;
        entry.check_shape(name, &self.shapes[id])?;
        self.entries[id] = entry;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &OffsetEntry<F>)> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.entries)
            .map(|((n, s), e)| (n.as_str(), s.as_slice(), e))
    }

    pub fn is_all_zero(&self) -> bool {
        self.entries.iter().all(OffsetEntry::is_zero)
    }

    /// Names with a non-Zero entry.
    pub fn nonzero_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, _, e)| !e.is_zero())
            .map(|(n, _, _)| n)
            .collect()
    }

    pub fn nonzero_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.is_zero()).count()
    }

    /// Checks names, order, and shapes against a baseline.
    pub fn check_against(&self, baseline: &ParameterSet<F>) -> Result<()> {
        if baseline.len() != self.len() {
            return Err(Error::dim(format!(
                "{} offsets for {} baseline tensors",
                self.len(),
                baseline.len()
            )));
        }
        for (id, (name, t)) in baseline.iter().enumerate() {
            if self.names[id] != name {
                return Err(Error::Lookup(self.names[id].clone()));
            }
            if self.shapes[id] != t.shape() {
                return Err(Error::dim(format!(
                    "offset layout for `{name}` is {:?}, baseline is {:?}",
                    self.shapes[id],
                    t.shape()
                )));
            }
            self.entries[id].check_shape(name, t.shape())?;
        }
        Ok(())
    }
}

/// `W = W_b + W_u` per tensor. The baseline is not modified.
pub fn compose<F: Scalar>(
    baseline: &ParameterSet<F>,
    offsets: &OffsetSet<F>,
) -> Result<ParameterSet<F>> {
    offsets.check_against(baseline)?;
    let mut out = baseline.clone();
    for id in 0..offsets.len() {
        apply_entry(out.by_index_mut(id), offsets.entry(id));
    }
    Ok(out)
}

/// Adds one offset entry onto a tensor of matching shape.
pub(crate) fn apply_entry<F: Scalar>(target: &mut Tensor<F>, entry: &OffsetEntry<F>) {
    match entry {
        OffsetEntry::Zero => {}
        OffsetEntry::Dense(d) => {
            for (w, &u) in target.values_mut().iter_mut().zip(d.values()) {
                *w = *w + u;
            }
        }
        OffsetEntry::SparseRows(s) => {
            for (k, &i) in s.row_ids.iter().enumerate() {
                for (w, &u) in target.row_mut(i).iter_mut().zip(s.row(k)) {
                    *w = *w + u;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredParamCount {
    pub total: usize,
    pub per_tensor: Vec<(String, usize)>,
    pub per_region: BTreeMap<Region, usize>,
}

/// Stored offset parameters: dense fully, sparse rows as rows × width, Zero as nothing.
pub fn offset_param_count<F: Scalar>(
    offsets: &OffsetSet<F>,
    config: &ModelConfig,
) -> Result<StoredParamCount> {
    let mut per_region: BTreeMap<Region, usize> = Region::ALL.iter().map(|&r| (r, 0)).collect();
    let mut per_tensor = Vec::with_capacity(offsets.len());
    let mut total = 0;
    for (name, _, entry) in offsets.iter() {
        let n = entry.stored_params();
        *per_region.entry(region_of(name, config)?).or_insert(0) += n;
        per_tensor.push((name.to_string(), n));
        total += n;
    }
    Ok(StoredParamCount {
        total,
        per_tensor,
        per_region,
    })
}
