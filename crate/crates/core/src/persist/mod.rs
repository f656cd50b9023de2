//! Binary checkpoint and offset files.
//!
//! Both formats are little-endian with 32-bit floats and end with the SHA-256
//! of all preceding bytes. An offset file records the checksum of the
//! checkpoint it was trained against and refuses to compose with any other.

mod codec;

use std::path::Path;

use codec::{read_file, write_atomic, Reader, Writer, DIGEST_LEN};

use crate::adapt::{compose, OffsetEntry, OffsetSet, SparseRows};
use crate::error::{Error, Result};
use crate::model::{tensor_layout, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMTB";
pub const OFFSET_MAGIC: &[u8; 4] = b"NMTO";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const OFFSET_VERSION: u32 = 1;

const TAG_ZERO: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_SPARSE: u8 = 2;

pub type Checksum = [u8; DIGEST_LEN];

fn to_f32s<F: Scalar>(values: &[F]) -> impl Iterator<Item = f32> + '_ {
    values.iter().map(|v| v.to_f32().unwrap_or(f32::NAN))
}

fn from_f32s<F: Scalar>(values: Vec<f32>) -> Vec<F> {
    values.into_iter().map(|v| F::of(v as f64)).collect()
}

/// Serialized checkpoint bytes, including the trailing checksum.
pub fn encode_checkpoint<F: Scalar>(
    params: &ParameterSet<F>,
    config: &ModelConfig,
) -> Result<Vec<u8>> {
    check_layout(params, config)?;
    let mut w = Writer::default();
    w.raw(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize)?;
    for v in [
        config.src_vocab,
        config.tgt_vocab,
        config.d_model,
        config.enc_layers,
        config.dec_layers,
        config.enc_filter,
        config.heads,
        config.max_len,
    ] {
        w.u32(v)?;
    }
    w.f64(config.dropout);
    w.u32(params.len())?;
    for (name, t) in params.iter() {
        w.name(name)?;
        w.dims(t.shape())?;
        for v in to_f32s(t.values()) {
            w.f32(v);
        }
    }
    Ok(w.finish())
}

pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, ParameterSet<F>)> {
    let mut r = Reader::checked(bytes)?;
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let mut fields = [0usize; 8];
    for f in fields.iter_mut() {
        *f = r.usize()?;
    }
    let [src_vocab, tgt_vocab, d_model, enc_layers, dec_layers, enc_filter, heads, max_len] =
        fields;
    let config = ModelConfig {
        src_vocab,
        tgt_vocab,
        d_model,
        enc_layers,
        dec_layers,
        enc_filter,
        heads,
        max_len,
        dropout: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored model config is invalid: {e}")))?;
    let count = r.usize()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = r.name()?;
        let shape = r.dims()?;
        let n = shape.iter().product();
        let values = from_f32s(r.f32s(n)?);
        params.insert(name, Tensor::new(shape, values)?)?;
    }
    r.done()?;
    check_layout(&params, &config)?;
    Ok((config, params))
}

fn check_layout<F: Scalar>(params: &ParameterSet<F>, config: &ModelConfig) -> Result<()> {
    let layout = tensor_layout(config);
    let matches = layout.len() == params.len()
        && layout
            .iter()
            .zip(params.iter())
            .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
    if !matches {
        return Err(Error::Compatibility(
            "tensors do not match the model configuration".into(),
        ));
    }
    Ok(())
}

/// SHA-256 identifying a baseline: the trailing checksum of its checkpoint bytes.
pub fn baseline_checksum<F: Scalar>(
    params: &ParameterSet<F>,
    config: &ModelConfig,
) -> Result<Checksum> {
    let bytes = encode_checkpoint(params, config)?;
    Ok(bytes[bytes.len() - DIGEST_LEN..]
        .try_into()
        .expect("digest length"))
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ParameterSet<F>,
    config: &ModelConfig,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, config)?)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(ModelConfig, ParameterSet<F>)> {
    decode_checkpoint(&read_file(path)?)
}

/// Offsets together with the checksum of the baseline they apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetFile<F> {
    pub baseline: Checksum,
    pub offsets: OffsetSet<F>,
}

impl<F: Scalar> OffsetFile<F> {
    pub fn new(
        offsets: OffsetSet<F>,
        baseline: &ParameterSet<F>,
        config: &ModelConfig,
    ) -> Result<Self> {
        offsets.check_against(baseline)?;
        Ok(Self {
            baseline: baseline_checksum(baseline, config)?,
            offsets,
        })
    }

    /// Fails with a compatibility error unless `baseline` is the one these offsets were made for.
    pub fn check_baseline(&self, baseline: &ParameterSet<F>, config: &ModelConfig) -> Result<()> {
        if baseline_checksum(baseline, config)? != self.baseline {
            return Err(Error::Compatibility(
                "offsets were trained against a different baseline".into(),
            ));
        }
        self.offsets.check_against(baseline).map_err(|e| {
            Error::Compatibility(format!("offset layout does not fit the baseline: {e}"))
        })
    }

    pub fn compose(
        &self,
        baseline: &ParameterSet<F>,
        config: &ModelConfig,
    ) -> Result<ParameterSet<F>> {
        self.check_baseline(baseline, config)?;
        compose(baseline, &self.offsets)
    }
}

pub fn encode_offsets<F: Scalar>(file: &OffsetFile<F>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.raw(OFFSET_MAGIC);
    w.u32(OFFSET_VERSION as usize)?;
    w.raw(&file.baseline);
    w.u32(file.offsets.len())?;
    for (name, shape, entry) in file.offsets.iter() {
        w.name(name)?;
        match entry {
            OffsetEntry::Zero => w.u8(TAG_ZERO),
            OffsetEntry::Dense(t) => {
                w.u8(TAG_DENSE);
                w.dims(shape)?;
                to_f32s(t.values()).for_each(|v| w.f32(v));
            }
            OffsetEntry::SparseRows(s) => {
                w.u8(TAG_SPARSE);
                w.dims(shape)?;
                w.u32(s.row_ids().len())?;
                s.row_ids().iter().try_for_each(|&i| w.u32(i))?;
                to_f32s(s.values()).for_each(|v| w.f32(v));
            }
        }
    }
    Ok(w.finish())
}

/// Decodes an offset file. Zero entries carry no shape, so shapes come from `config`.
pub fn decode_offsets<F: Scalar>(bytes: &[u8], config: &ModelConfig) -> Result<OffsetFile<F>> {
    let mut r = Reader::checked(bytes)?;
    r.magic(OFFSET_MAGIC)?;
    r.version(OFFSET_VERSION)?;
    let baseline: Checksum = r.take(DIGEST_LEN)?.try_into().expect("digest length");
    let layout = tensor_layout(config);
    let count = r.usize()?;
    if count != layout.len() {
        return Err(Error::Compatibility(format!(
            "{count} offset entries for a model with {} tensors",
            layout.len()
        )));
    }
    let mut offsets = OffsetSet::from_layout(layout.clone())?;
    for (expected, shape) in &layout {
        let name = r.name()?;
        if &name != expected {
            return Err(Error::Compatibility(format!(
                "offset entry `{name}` where `{expected}` was expected"
            )));
        }
        let entry = match r.u8()? {
            TAG_ZERO => OffsetEntry::Zero,
            TAG_DENSE => {
                let dims = read_shape(&mut r, &name, shape)?;
                let n = dims.iter().product();
                OffsetEntry::Dense(Tensor::new(dims, from_f32s(r.f32s(n)?))?)
            }
            TAG_SPARSE => {
                let dims = read_shape(&mut r, &name, shape)?;
                let rows = r.usize()?;
                let ids = (0..rows).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
                let width = *dims.last().expect("rank checked");
                let values = from_f32s(r.f32s(rows * width)?);
                OffsetEntry::SparseRows(SparseRows::new(ids, width, values)?)
            }
            tag => {
                return Err(Error::Format(format!(
                    "unknown entry kind {tag} for `{name}`"
                )))
            }
        };
        offsets.set(&name, entry)?;
    }
    r.done()?;
    Ok(OffsetFile { baseline, offsets })
}

fn read_shape(r: &mut Reader<'_>, name: &str, expected: &[usize]) -> Result<Vec<usize>> {
    let dims = r.dims()?;
    if dims != expected {
        return Err(Error::Compatibility(format!(
            "offset `{name}` has shape {dims:?}, model expects {expected:?}"
        )));
    }
    Ok(dims)
}

pub fn save_offsets<F: Scalar>(path: &Path, file: &OffsetFile<F>) -> Result<()> {
    write_atomic(path, &encode_offsets(file)?)
}

pub fn load_offsets<F: Scalar>(path: &Path, config: &ModelConfig) -> Result<OffsetFile<F>> {
    decode_offsets(&read_file(path)?, config)
}
