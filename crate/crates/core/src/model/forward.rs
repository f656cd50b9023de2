//! Forward computation: encoder, simplified decoder, teacher-forced loss,
//! greedy decoding, and perplexity.

use super::layout::{OUTPUT_PROJECTION, SRC_EMBEDDING, TGT_EMBEDDING};
use super::{ModelConfig, BOS, EOS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradStore, Graph, ParameterSet, RandomSource, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// One source/target pair of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Segment {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Segment {
    pub fn new(source: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Length(
                "segments need a nonempty source and target".into(),
            ));
        }
        Ok(Self { source, target })
    }

    /// Decoder input: BOS followed by the target.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.target.iter().copied())
            .collect()
    }

    /// Decoder labels: the target followed by EOS.
    pub fn decoder_labels(&self) -> Vec<usize> {
        self.target
            .iter()
            .copied()
            .chain(std::iter::once(EOS))
            .collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.source.len() + self.target.len()
    }
}

/// Per-position hidden states, one row per position and `d_model` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceStates<F>(pub Tensor<F>);

impl<F: Scalar> SequenceStates<F> {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }
}

/// Evaluation is deterministic; training applies inverted dropout from `rng`.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut RandomSource,
    },
}

impl<'r> Mode<'r> {
    pub fn train(dropout: f64, rng: &'r mut RandomSource) -> Self {
        Mode::Train { dropout, rng }
    }

    fn apply<F: Scalar>(&mut self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, rng } => g.dropout(x, F::of(*dropout), rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMask {
    None,
    /// Query `i` may attend to keys `0..=i`.
    Causal,
    /// Row-major `queries × keys` table; `false` entries are masked out.
    Explicit {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

/// Fixed sinusoidal encodings for positions `0..len`.
pub fn positional_encoding<F: Scalar>(len: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            out.push(F::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(&id) => Err(Error::Index {
            index: id,
            size: vocab,
        }),
        None => Ok(()),
    }
}

/// Attention sub-layer on the graph. Returns the projected output and the
/// per-head weight matrices.
fn attention<F: Scalar>(
    g: &mut Graph<'_, F>,
    queries: Var,
    keys: Var,
    values: Var,
    mask: &AttentionMask,
    prefix: &str,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (nq, d) = g.shape(queries);
    let (nk, dk) = g.shape(keys);
    if dk != d || g.shape(values) != (nk, d) {
        return Err(Error::dim(format!(
            "attention widths: queries {:?}, keys {:?}, values {:?}",
            g.shape(queries),
            g.shape(keys),
            g.shape(values)
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let mask_input = match mask {
        AttentionMask::None => None,
        AttentionMask::Causal => {
            if nq != nk {
                return Err(Error::dim(format!(
                    "causal mask over {nq} queries and {nk} keys"
                )));
            }
            None
        }
        AttentionMask::Explicit {
            rows,
            cols,
            allowed,
        } => {
            if (*rows, *cols) != (nq, nk) || allowed.len() != rows * cols {
                return Err(Error::dim(format!(
                    "mask {rows}x{cols} for {nq} queries and {nk} keys"
                )));
            }
            let add = allowed
                .iter()
                .map(|&ok| if ok { F::zero() } else { F::neg_infinity() })
                .collect();
            Some(g.input(nq, nk, add)?)
        }
    };
    let causal = matches!(mask, AttentionMask::Causal);
    let proj = |g: &mut Graph<'_, F>, x: Var, which: &str| -> Result<Var> {
        let w = g.param(&format!("{prefix}.{which}.weight"))?;
        let b = g.param(&format!("{prefix}.{which}.bias"))?;
        g.affine(x, w, b)
    };
    let q = proj(g, queries, "q")?;
    let k = proj(g, keys, "k")?;
    let v = proj(g, values, "v")?;
    let dh = d / heads;
    let scale = F::one() / F::of_usize(dh).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_bt(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask_input {
            scores = g.add(scores, m)?;
        }
        let p = g.softmax_rows(scores, causal);
        weights.push(p);
        outs.push(g.matmul(p, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok((proj(g, joined, "o")?, weights))
}

fn embed<F: Scalar>(g: &mut Graph<'_, F>, table: &str, ids: &[usize], d: usize) -> Result<Var> {
    let t = g.param(table)?;
    let x = g.gather(t, ids)?;
    let x = g.scale(x, F::of_usize(d).sqrt());
    let pe = g.input(ids.len(), d, positional_encoding(ids.len(), d))?;
    g.add(x, pe)
}

fn encoder_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    source: &[usize],
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if source.is_empty() {
        return Err(Error::Length("empty source".into()));
    }
    if source.len() > config.max_len {
        return Err(Error::Length(format!(
            "source of {} tokens exceeds max_len {}",
            source.len(),
            config.max_len
        )));
    }
    check_ids(source, config.src_vocab)?;
    let d = config.d_model;
    let x = embed(g, SRC_EMBEDDING, source, d)?;
    let mut x = mode.apply(g, x)?;
    for l in 0..config.enc_layers {
        let p = format!("enc.{l}");
        let (a, _) = attention(
            g,
            x,
            x,
            x,
            &AttentionMask::None,
            &format!("{p}.self_attn"),
            config.heads,
        )?;
        let a = mode.apply(g, a)?;
        let r = g.add(x, a)?;
        let (gain, bias) = (
            g.param(&format!("{p}.attn_norm.gain"))?,
            g.param(&format!("{p}.attn_norm.bias"))?,
        );
        x = g.layer_norm(r, gain, bias, F::of(NORM_EPS))?;

        let f = filter_graph(g, x, &p)?;
        let f = mode.apply(g, f)?;
        let r = g.add(x, f)?;
        let (gain, bias) = (
            g.param(&format!("{p}.filter_norm.gain"))?,
            g.param(&format!("{p}.filter_norm.bias"))?,
        );
        x = g.layer_norm(r, gain, bias, F::of(NORM_EPS))?;
    }
    Ok(x)
}

/// `max(0, x·W1 + b1)·W2 + b2`, position-wise.
fn filter_graph<F: Scalar>(g: &mut Graph<'_, F>, x: Var, prefix: &str) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.filter.w1"))?;
    let b1 = g.param(&format!("{prefix}.filter.b1"))?;
    let w2 = g.param(&format!("{prefix}.filter.w2"))?;
    let b2 = g.param(&format!("{prefix}.filter.b2"))?;
    let h = g.affine(x, w1, b1)?;
    let h = g.relu(h);
    g.affine(h, w2, b2)
}

/// Decoder stack on the graph; returns logits of shape `len(input) × tgt_vocab`.
fn decoder_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    enc: Var,
    input: &[usize],
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if input.len() > config.max_len {
        return Err(Error::Length(format!(
            "decoder input of {} positions exceeds max_len {}",
            input.len(),
            config.max_len
        )));
    }
    check_ids(input, config.tgt_vocab)?;
    let d = config.d_model;
    if g.shape(enc).1 != d {
        return Err(Error::dim("encoder states width differs from d_model"));
    }
    let y = embed(g, TGT_EMBEDDING, input, d)?;
    let mut y = mode.apply(g, y)?;
    for l in 0..config.dec_layers {
        let p = format!("dec.{l}");
        let (s, _) = attention(
            g,
            y,
            y,
            y,
            &AttentionMask::Causal,
            &format!("{p}.self_attn"),
            config.heads,
        )?;
        let s = mode.apply(g, s)?;
        y = g.add(y, s)?;
        let (c, _) = attention(
            g,
            y,
            enc,
            enc,
            &AttentionMask::None,
            &format!("{p}.cross_attn"),
            config.heads,
        )?;
        let c = mode.apply(g, c)?;
        y = g.add(y, c)?;
        let w = g.param(&format!("{p}.filter.w"))?;
        let b = g.param(&format!("{p}.filter.b"))?;
        let f = g.affine(y, w, b)?;
        let f = mode.apply(g, f)?;
        let r = g.add(y, f)?;
        let (gain, bias) = (
            g.param(&format!("{p}.norm.gain"))?,
            g.param(&format!("{p}.norm.bias"))?,
        );
        y = g.layer_norm(r, gain, bias, F::of(NORM_EPS))?;
    }
    let out = g.param(OUTPUT_PROJECTION)?;
    g.matmul_bt(y, out)
}

/// Teacher-forced mean label-smoothed loss of one segment, built on `g`.
pub fn segment_loss_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    segment: &Segment,
    config: &ModelConfig,
    eps_ls: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if segment.target.is_empty() {
        return Err(Error::Length("empty target".into()));
    }
    let enc = encoder_graph(g, &segment.source, config, mode)?;
    let logits = decoder_graph(g, enc, &segment.decoder_input(), config, mode)?;
    g.cross_entropy(logits, &segment.decoder_labels(), F::of(eps_ls))
}

/// Loss of one segment; with `store`, also accumulates parameter gradients into it.
pub fn segment_loss<F: Scalar>(
    params: &ParameterSet<F>,
    config: &ModelConfig,
    segment: &Segment,
    eps_ls: f64,
    mut mode: Mode<'_>,
    store: Option<&mut GradStore<F>>,
) -> Result<F> {
    match store {
        Some(store) => {
            let mut g = Graph::new(params);
            let loss = segment_loss_graph(&mut g, segment, config, eps_ls, &mut mode)?;
            g.backward(loss, store)?;
            Ok(g.scalar(loss))
        }
        None => {
            let mut g = Graph::inference(params);
            let loss = segment_loss_graph(&mut g, segment, config, eps_ls, &mut mode)?;
            Ok(g.scalar(loss))
        }
    }
}

/// Encoder states `z₁..z_m` for a source sentence.
pub fn encode<F: Scalar>(
    source: &[usize],
    params: &ParameterSet<F>,
    config: &ModelConfig,
    mut mode: Mode<'_>,
) -> Result<SequenceStates<F>> {
    let mut g = Graph::inference(params);
    let z = encoder_graph(&mut g, source, config, &mut mode)?;
    Ok(SequenceStates(g.to_tensor(z)))
}

/// Teacher-forced loss and logits given precomputed encoder states.
pub fn decode_train<F: Scalar>(
    segment: &Segment,
    enc_out: &SequenceStates<F>,
    params: &ParameterSet<F>,
    config: &ModelConfig,
    eps_ls: f64,
    mut mode: Mode<'_>,
) -> Result<(F, Tensor<F>)> {
    if segment.target.is_empty() {
        return Err(Error::Length("empty target".into()));
    }
    let mut g = Graph::inference(params);
    let enc = g.input(enc_out.len(), enc_out.width(), enc_out.0.values().to_vec())?;
    let logits = decoder_graph(&mut g, enc, &segment.decoder_input(), config, &mut mode)?;
    let loss = g.cross_entropy(logits, &segment.decoder_labels(), F::of(eps_ls))?;
    Ok((g.scalar(loss), g.to_tensor(logits)))
}

/// Greedy search: take the arg-max token (lowest id on ties) until EOS or `max_steps`.
pub fn greedy_decode<F: Scalar>(
    source: &[usize],
    params: &ParameterSet<F>,
    config: &ModelConfig,
    max_steps: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::inference(params);
    let enc = encoder_graph(&mut g, source, config, &mut Mode::Eval)?;
    let mut input = vec![BOS];
    let max_steps = max_steps.min(config.max_len.saturating_sub(1));
    for _ in 0..max_steps {
        let logits = decoder_graph(&mut g, enc, &input, config, &mut Mode::Eval)?;
        let v = config.tgt_vocab;
        let last = &g.value(logits)[(input.len() - 1) * v..input.len() * v];
        let mut best = 0;
        for (id, &z) in last.iter().enumerate() {
            if z > last[best] {
                best = id;
            }
        }
        if best == EOS {
            break;
        }
        input.push(best);
    }
    input.remove(0);
    Ok(input)
}

/// `exp` of the mean per-token negative log-likelihood, without smoothing or dropout.
pub fn perplexity<F: Scalar>(
    segment: &Segment,
    params: &ParameterSet<F>,
    config: &ModelConfig,
) -> Result<F> {
    let nll = segment_loss(params, config, segment, 0.0, Mode::Eval, None)?;
    Ok(nll.exp())
}

/// Multi-head scaled dot-product attention using the projections stored under `prefix`.
///
/// Returns the output states and one `queries × keys` weight matrix per head.
pub fn multi_head_attention<F: Scalar>(
    queries: &SequenceStates<F>,
    keys: &SequenceStates<F>,
    values: &SequenceStates<F>,
    mask: &AttentionMask,
    params: &ParameterSet<F>,
    prefix: &str,
    heads: usize,
) -> Result<(SequenceStates<F>, Vec<Tensor<F>>)> {
    let mut g = Graph::inference(params);
    let q = g.input(queries.len(), queries.width(), queries.0.values().to_vec())?;
    let k = g.input(keys.len(), keys.width(), keys.0.values().to_vec())?;
    let v = g.input(values.len(), values.width(), values.0.values().to_vec())?;
    let (out, weights) = attention(&mut g, q, k, v, mask, prefix, heads)?;
    Ok((
        SequenceStates(g.to_tensor(out)),
        weights.into_iter().map(|w| g.to_tensor(w)).collect(),
    ))
}

/// Encoder filter `max(0, x·W1 + b1)·W2 + b2` applied to each row of `x`.
pub fn encoder_filter<F: Scalar>(
    x: &Tensor<F>,
    w1: &Tensor<F>,
    b1: &Tensor<F>,
    w2: &Tensor<F>,
    b2: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut p = ParameterSet::new();
    p.insert("f.filter.w1", w1.clone())?;
    p.insert("f.filter.b1", b1.clone())?;
    p.insert("f.filter.w2", w2.clone())?;
    p.insert("f.filter.b2", b2.clone())?;
    let mut g = Graph::inference(&p);
    let xv = g.input(x.rows(), x.cols(), x.values().to_vec())?;
    let y = filter_graph(&mut g, xv, "f")?;
    Ok(g.to_tensor(y))
}

/// Decoder filter: the single linear map `x·W + b`.
pub fn decoder_filter<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut p = ParameterSet::new();
    p.insert("w", w.clone())?;
    p.insert("b", b.clone())?;
    let mut g = Graph::inference(&p);
    let xv = g.input(x.rows(), x.cols(), x.values().to_vec())?;
    let (wv, bv) = (g.param("w")?, g.param("b")?);
    let y = g.affine(xv, wv, bv)?;
    Ok(g.to_tensor(y))
}

#[cfg(test)]
mod tests;
