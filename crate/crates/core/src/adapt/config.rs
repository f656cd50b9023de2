//! Adaptation hyperparameters and the named adaptation methods.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::lasso::GroupLassoConfig;
use crate::error::{Error, Result};
use crate::model::{region_of, ModelConfig, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    Batch,
    Incremental,
}

/// Trainable regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask(BTreeSet<Region>);

impl RegionMask {
    pub fn all() -> Self {
        Self(Region::ALL.into_iter().collect())
    }

    pub fn none() -> Self {
        Self(BTreeSet::new())
    }

    pub fn only(region: Region) -> Self {
        Self([region].into_iter().collect())
    }

    pub fn of(regions: impl IntoIterator<Item = Region>) -> Self {
        Self(regions.into_iter().collect())
    }

    pub fn contains(&self, region: Region) -> bool {
        self.0.contains(&region)
    }

    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        self.0.iter().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationConfig {
    pub mode: AdaptMode,
    pub lr: f64,
    pub epochs: usize,
    /// Source plus target tokens per minibatch (batch mode).
    pub batch_tokens: usize,
    pub dropout: f64,
    pub eps_ls: f64,
    pub max_updates_per_segment: usize,
    pub ppl_stop: f64,
    pub region_mask: RegionMask,
    /// Extra tensors trainable regardless of region.
    pub fixed_tensors: Option<BTreeSet<String>>,
    /// Restrict vocabulary-indexed offsets to rows of tokens seen in training data.
    pub sparse_vocab: bool,
    pub lasso: Option<GroupLassoConfig>,
    pub seed: u64,
}

impl AdaptationConfig {
    pub fn batch() -> Self {
        Self {
            mode: AdaptMode::Batch,
            lr: 0.1,
            epochs: 10,
            batch_tokens: 7000,
            dropout: 0.1,
            eps_ls: 0.1,
            max_updates_per_segment: 3,
            ppl_stop: 1.5,
            region_mask: RegionMask::all(),
            fixed_tensors: None,
            sparse_vocab: false,
            lasso: None,
            seed: 1,
        }
    }

    pub fn incremental() -> Self {
        Self {
            mode: AdaptMode::Incremental,
            lr: 0.01,
            dropout: 0.0,
            eps_ls: 0.0,
            ..Self::batch()
        }
    }

    /// Same tensor selection and regularization, incremental hyperparameters.
    pub fn to_incremental(&self) -> Self {
        Self {
            region_mask: self.region_mask.clone(),
            fixed_tensors: self.fixed_tensors.clone(),
            sparse_vocab: self.sparse_vocab,
            lasso: self.lasso.clone(),
            seed: self.seed,
            ..Self::incremental()
        }
    }

    /// Dropout and smoothing that actually apply in this mode.
    pub fn effective_dropout(&self) -> f64 {
        match self.mode {
            AdaptMode::Batch => self.dropout,
            AdaptMode::Incremental => 0.0,
        }
    }

    pub fn effective_eps_ls(&self) -> f64 {
        match self.mode {
            AdaptMode::Batch => self.eps_ls,
            AdaptMode::Incremental => 0.0,
        }
    }

    pub fn is_trainable(&self, name: &str, model: &ModelConfig) -> Result<bool> {
        let fixed = self
            .fixed_tensors
            .as_ref()
            .is_some_and(|f| f.contains(name));
        Ok(fixed || self.region_mask.contains(region_of(name, model)?))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("learning rate must be finite and ≥ 0");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.eps_ls) {
            return bad("dropout and label smoothing must be in [0, 1)");
        }
        if self.mode == AdaptMode::Batch && (self.epochs == 0 || self.batch_tokens == 0) {
            return bad("batch mode needs at least one epoch and a positive token budget");
        }
        if self.mode == AdaptMode::Incremental
            && (self.max_updates_per_segment == 0 || self.ppl_stop.is_nan() || self.ppl_stop < 1.0)
        {
            return bad("incremental mode needs ≥ 1 update per segment and a perplexity stop ≥ 1");
        }
        if let Some(l) = &self.lasso {
            l.validate()?;
        }
        Ok(())
    }
}

/// Named choices of which offsets to train.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Every tensor.
    Full,
    /// One region only.
    Region(Region),
    /// Tensors picked on a development domain, plus the sparse output projection.
    Fixed(BTreeSet<String>),
    /// Outer, inner, and sparse output projection, regularized and clipped.
    Lasso(GroupLassoConfig),
}

impl Method {
    /// Sets the tensor selection and regularization fields of `cfg`.
    pub fn apply(&self, cfg: &mut AdaptationConfig) {
        cfg.fixed_tensors = None;
        cfg.lasso = None;
        cfg.sparse_vocab = false;
        match self {
            Method::Full => cfg.region_mask = RegionMask::all(),
            Method::Region(r) => cfg.region_mask = RegionMask::only(*r),
            Method::Fixed(names) => {
                cfg.region_mask = RegionMask::only(Region::OutputProjection);
                cfg.fixed_tensors = Some(names.clone());
                cfg.sparse_vocab = true;
            }
            Method::Lasso(l) => {
                cfg.region_mask = RegionMask::of([
                    Region::OuterLayers,
                    Region::InnerLayers,
                    Region::OutputProjection,
                ]);
                cfg.sparse_vocab = true;
                cfg.lasso = Some(l.clone());
            }
        }
    }

    pub fn configure(&self, mut cfg: AdaptationConfig) -> AdaptationConfig {
        self.apply(&mut cfg);
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Full => f.write_str("full"),
            Method::Region(r) => write!(f, "region:{r}"),
            Method::Fixed(_) => f.write_str("fixed"),
            Method::Lasso(_) => f.write_str("lasso"),
        }
    }
}

/// Parses `full`, `lasso`, or `region:<name>`. `fixed` needs a tensor list and
/// is built directly.
impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "lasso" => Ok(Method::Lasso(GroupLassoConfig::default())),
            _ => match s.strip_prefix("region:") {
                Some(r) => Ok(Method::Region(r.parse()?)),
                None => Err(Error::Config(format!("unknown method `{s}`"))),
            },
        }
    }
}
