//! Tensor naming scheme, shapes, regions, parameter accounting, and initialization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParameterSet, RandomSource, Tensor};

/// Source embedding matrix, one row per source vocabulary id.
pub const SRC_EMBEDDING: &str = "src_embedding";
/// Target embedding matrix, one row per target vocabulary id.
pub const TGT_EMBEDDING: &str = "tgt_embedding";
/// Output projection, one row per target vocabulary id; logits are `y · Yoᵀ`.
pub const OUTPUT_PROJECTION: &str = "output_projection";

/// The five disjoint parts of the network used for restricted adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    /// First and last layer of both encoder and decoder.
    OuterLayers,
    InnerLayers,
    EncoderEmbedding,
    DecoderEmbedding,
    OutputProjection,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::OuterLayers,
        Region::InnerLayers,
        Region::EncoderEmbedding,
        Region::DecoderEmbedding,
        Region::OutputProjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::OuterLayers => "outer-layers",
            Region::InnerLayers => "inner-layers",
            Region::EncoderEmbedding => "encoder-embedding",
            Region::DecoderEmbedding => "decoder-embedding",
            Region::OutputProjection => "output-projection",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown region `{s}`")))
    }
}

const ATTN_SUFFIXES: [&str; 8] = [
    "q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight", "o.bias",
];

fn attention_tensors(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for s in ATTN_SUFFIXES {
        let shape = if s.ends_with("weight") {
            vec![d, d]
        } else {
            vec![d]
        };
        out.push((format!("{prefix}.{s}"), shape));
    }
}

/// Every trainable tensor name with its shape, in a stable order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        (SRC_EMBEDDING.to_string(), vec![config.src_vocab, d]),
        (TGT_EMBEDDING.to_string(), vec![config.tgt_vocab, d]),
        (OUTPUT_PROJECTION.to_string(), vec![config.tgt_vocab, d]),
    ];
    for i in 0..config.enc_layers {
        let p = format!("enc.{i}");
        attention_tensors(&format!("{p}.self_attn"), d, &mut out);
        out.push((format!("{p}.attn_norm.gain"), vec![d]));
        out.push((format!("{p}.attn_norm.bias"), vec![d]));
        out.push((format!("{p}.filter.w1"), vec![d, config.enc_filter]));
        out.push((format!("{p}.filter.b1"), vec![config.enc_filter]));
        out.push((format!("{p}.filter.w2"), vec![config.enc_filter, d]));
        out.push((format!("{p}.filter.b2"), vec![d]));
        out.push((format!("{p}.filter_norm.gain"), vec![d]));
        out.push((format!("{p}.filter_norm.bias"), vec![d]));
    }
    for i in 0..config.dec_layers {
        let p = format!("dec.{i}");
        attention_tensors(&format!("{p}.self_attn"), d, &mut out);
        attention_tensors(&format!("{p}.cross_attn"), d, &mut out);
        out.push((format!("{p}.filter.w"), vec![d, d]));
        out.push((format!("{p}.filter.b"), vec![d]));
        out.push((format!("{p}.norm.gain"), vec![d]));
        out.push((format!("{p}.norm.bias"), vec![d]));
    }
    out
}

/// Region label of a tensor name under `config`'s naming scheme.
pub fn region_of(name: &str, config: &ModelConfig) -> Result<Region> {
    match name {
        SRC_EMBEDDING => return Ok(Region::EncoderEmbedding),
        TGT_EMBEDDING => return Ok(Region::DecoderEmbedding),
        OUTPUT_PROJECTION => return Ok(Region::OutputProjection),
        _ => {}
    }
    let unknown = || Error::Lookup(name.to_string());
    let mut parts = name.splitn(3, '.');
    let (stack, index, rest) = (
        parts.next().ok_or_else(unknown)?,
        parts.next().ok_or_else(unknown)?,
        parts.next().ok_or_else(unknown)?,
    );
    let index: usize = index.parse().map_err(|_| unknown())?;
    let layers = match stack {
        "enc" => config.enc_layers,
        "dec" => config.dec_layers,
        _ => return Err(unknown()),
    };
    let valid_suffix = match stack {
        "enc" => {
            rest.strip_prefix("self_attn.")
                .is_some_and(|s| ATTN_SUFFIXES.contains(&s))
                || matches!(
                    rest,
                    "attn_norm.gain"
                        | "attn_norm.bias"
                        | "filter.w1"
                        | "filter.b1"
                        | "filter.w2"
                        | "filter.b2"
                        | "filter_norm.gain"
                        | "filter_norm.bias"
                )
        }
        _ => {
            rest.strip_prefix("self_attn.")
                .or_else(|| rest.strip_prefix("cross_attn."))
                .is_some_and(|s| ATTN_SUFFIXES.contains(&s))
                || matches!(rest, "filter.w" | "filter.b" | "norm.gain" | "norm.bias")
        }
    };
    if index >= layers || !valid_suffix {
        return Err(unknown());
    }
    if index == 0 || index == layers - 1 {
        Ok(Region::OuterLayers)
    } else {
        Ok(Region::InnerLayers)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub per_tensor: Vec<(String, usize)>,
    pub per_region: BTreeMap<Region, usize>,
    pub total: usize,
}

impl ParamCount {
    pub fn region(&self, region: Region) -> usize {
        self.per_region.get(&region).copied().unwrap_or(0)
    }
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let mut per_region: BTreeMap<Region, usize> = Region::ALL.iter().map(|&r| (r, 0)).collect();
    let mut per_tensor = Vec::new();
    let mut total = 0;
    for (name, shape) in tensor_layout(config) {
        let n: usize = shape.iter().product();
        let region = region_of(&name, config).expect("layout names are valid");
        *per_region.get_mut(&region).expect("all regions present") += n;
        total += n;
        per_tensor.push((name, n));
    }
    ParamCount {
        per_tensor,
        per_region,
        total,
    }
}

/// Fresh parameters: fan-based uniform matrices, zero biases, unit layer-norm gains.
pub fn init_parameters<F: Scalar>(
    config: &ModelConfig,
    rng: &mut RandomSource,
) -> Result<ParameterSet<F>> {
    config.validate()?;
    let mut params = ParameterSet::new();
    for (name, shape) in tensor_layout(config) {
        let n: usize = shape.iter().product();
        let values = if shape.len() == 2 {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| F::of(rng.uniform(-limit, limit))).collect()
        } else if name.ends_with(".gain") {
            vec![F::one(); n]
        } else {
            vec![F::zero(); n]
        };
        params.insert(name, Tensor::new(shape, values)?)?;
    }
    Ok(params)
}
