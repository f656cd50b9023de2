//! The self-attentive encoder–decoder: configuration, tensor naming and
//! regions, initialization, and the forward, loss, and decoding paths.

mod config;
mod forward;
mod layout;

pub use config::{ModelConfig, BOS, EOS, PAD, UNK};
pub use forward::{
    decode_train, decoder_filter, encode, encoder_filter, greedy_decode, multi_head_attention,
    perplexity, positional_encoding, segment_loss, segment_loss_graph, AttentionMask, Mode,
    Segment, SequenceStates,
};
pub use layout::{
    init_parameters, param_count, region_of, tensor_layout, ParamCount, Region, OUTPUT_PROJECTION,
    SRC_EMBEDDING, TGT_EMBEDDING,
};
