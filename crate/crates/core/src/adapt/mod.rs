//! Personalization through offset tensors on top of a frozen baseline.

mod config;
mod lasso;
mod offsets;
mod selection;
mod trainer;

pub use config::{AdaptMode, AdaptationConfig, Method, RegionMask};
pub use lasso::{clip_offsets, group_lasso_penalty, group_lasso_subgradient, GroupLassoConfig};
pub use offsets::{
    compose, offset_param_count, OffsetEntry, OffsetSet, SparseRows, StoredParamCount,
};
pub use selection::{
    restrict_rows, restrict_tensors_to_observed_vocab, restrict_to_observed_vocab,
    select_fixed_tensors,
};
pub(crate) use trainer::batch_loss_and_grad;
pub use trainer::{
    adaptation_objective, batch_adapt, batch_adapt_from, combined_adapt, incremental_adapt,
    max_decode_len, run_update_schedule, token_batches, IncrementalOutcome, SegmentStats,
};
