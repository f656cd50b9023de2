use super::*;
use crate::model::{init_parameters, ModelConfig};
use approx::assert_relative_eq;

fn tiny() -> ModelConfig {
    ModelConfig {
        src_vocab: 7,
        tgt_vocab: 9,
        d_model: 8,
        enc_layers: 2,
        dec_layers: 2,
        enc_filter: 16,
        heads: 2,
        max_len: 16,
        dropout: 0.0,
    }
}

fn params(config: &ModelConfig, seed: u64) -> ParameterSet<f64> {
    init_parameters(config, &mut RandomSource::new(seed)).unwrap()
}

fn states(rows: &[Vec<f64>]) -> SequenceStates<f64> {
    SequenceStates(Tensor::from_rows(rows).unwrap())
}

fn random_states(n: usize, d: usize, seed: u64) -> SequenceStates<f64> {
    let mut rng = RandomSource::new(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    states(&rows)
}

#[test]
fn single_position_attention_passes_values_through() {
    let c = tiny();
    let p = params(&c, 1);
    let x = random_states(1, 8, 2);
    let (out, weights) =
        multi_head_attention(&x, &x, &x, &AttentionMask::None, &p, "enc.0.self_attn", 2).unwrap();
    for w in &weights {
        assert_eq!(w.values(), &[1.0]);
    }
    let wv = p.get("enc.0.self_attn.v.weight").unwrap();
    let wo = p.get("enc.0.self_attn.o.weight").unwrap();
    let v = crate::tensor::matmul(x.tensor(), wv).unwrap();
    let expected = crate::tensor::matmul(&v, wo).unwrap();
    for (a, b) in out.tensor().values().iter().zip(expected.values()) {
        assert_relative_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn causal_attention_never_looks_ahead() {
    let c = tiny();
    let p = params(&c, 3);
    for n in 1..=5 {
        let x = random_states(n, 8, 10 + n as u64);
        let (_, weights) =
            multi_head_attention(&x, &x, &x, &AttentionMask::Causal, &p, "dec.0.self_attn", 2)
                .unwrap();
        for w in &weights {
            for i in 0..n {
                let row = w.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &a) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(a, 0.0, "n={n} i={i} j={j}");
                    } else {
                        assert!(a > 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn uniform_keys_give_uniform_weights() {
    let c = tiny();
    let p = params(&c, 4);
    let q = random_states(3, 8, 5);
    let key_row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let k = states(&vec![key_row; 4]);
    let v = random_states(4, 8, 6);
    let (_, weights) =
        multi_head_attention(&q, &k, &v, &AttentionMask::None, &p, "dec.0.cross_attn", 2).unwrap();
    for w in weights {
        for &a in w.values() {
            assert_relative_eq!(a, 0.25, epsilon = 1e-12);
        }
    }
}

#[test]
fn explicit_mask_zeroes_disallowed_keys() {
    let c = tiny();
    let p = params(&c, 4);
    let q = random_states(2, 8, 7);
    let k = random_states(3, 8, 8);
    let mask = AttentionMask::Explicit {
        rows: 2,
        cols: 3,
        allowed: vec![true, false, true, false, true, true],
    };
    let (_, weights) = multi_head_attention(&q, &k, &k, &mask, &p, "dec.0.cross_attn", 2).unwrap();
    for w in weights {
        assert_eq!(w.row(0)[1], 0.0);
        assert_eq!(w.row(1)[0], 0.0);
    }
    let bad = AttentionMask::Explicit {
        rows: 3,
        cols: 3,
        allowed: vec![true; 9],
    };
    assert!(matches!(
        multi_head_attention(&q, &k, &k, &bad, &p, "dec.0.cross_attn", 2),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn encoder_filter_examples() {
    // Positive pass-through: no clipping, so the map is affine.
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let w1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b1 = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
    let w2 = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let b2 = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
    let y = encoder_filter(&x, &w1, &b1, &w2, &b2).unwrap();
    assert_eq!(y.values(), &[4.0, 6.5]);

    // Negative pre-activations: output is b2.
    let nb1 = Tensor::new(vec![2], vec![-10.0, -10.0]).unwrap();
    let y = encoder_filter(&x, &w1, &nb1, &w2, &b2).unwrap();
    assert_eq!(y.values(), &[1.0, -1.0]);

    // xW1 + b1 = [1, 1.5, -2.5] -> relu [1, 1.5, 0] -> [3.5, 1.5] + b2 = [3.6, 1.4].
    let w1 = Tensor::from_rows(&[vec![1.0, -1.0, 0.5], vec![0.0, 1.0, -2.0]]).unwrap();
    let b1 = Tensor::new(vec![3], vec![0.0, 0.5, 1.0]).unwrap();
    let w2 = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap();
    let b2 = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();
    let y = encoder_filter(&x, &w1, &b1, &w2, &b2).unwrap();
    assert_relative_eq!(y.values()[0], 3.6, epsilon = 1e-12);
    assert_relative_eq!(y.values()[1], 1.4, epsilon = 1e-12);

    let wrong = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    assert!(encoder_filter(&x, &wrong, &b1, &w2, &b2).is_err());
}

#[test]
fn decoder_filter_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let zero = Tensor::zeros(vec![2]).unwrap();
    assert_eq!(
        decoder_filter(&x, &eye, &zero).unwrap().values(),
        x.values()
    );

    let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    let z = Tensor::zeros(vec![1, 2]).unwrap();
    assert_eq!(decoder_filter(&z, &eye, &b).unwrap().values(), &[1.0, 1.0]);

    let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
    assert_eq!(decoder_filter(&x, &w, &b).unwrap().values(), &[8.0, 11.0]);
}

#[test]
fn encode_shape_determinism_and_order_sensitivity() {
    let c = tiny();
    let p = params(&c, 5);
    let z = encode(&[4, 5, 6], &p, &c, Mode::Eval).unwrap();
    assert_eq!((z.len(), z.width()), (3, 8));
    assert_eq!(z, encode(&[4, 5, 6], &p, &c, Mode::Eval).unwrap());
    let permuted = encode(&[6, 5, 4], &p, &c, Mode::Eval).unwrap();
    assert_ne!(z.tensor().row(0), permuted.tensor().row(2));

    assert!(matches!(
        encode(&[4, 7], &p, &c, Mode::Eval),
        Err(Error::Index { index: 7, .. })
    ));
    assert!(matches!(
        encode(&[4; 17], &p, &c, Mode::Eval),
        Err(Error::Length(_))
    ));
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let mut c = tiny();
    c.d_model = 16;
    c.tgt_vocab = 40;
    let p = params(&c, 6);
    let mut rng = RandomSource::new(1);
    let mut total = 0.0;
    for _ in 0..20 {
        let src: Vec<usize> = (0..5).map(|_| 3 + rng.below(4)).collect();
        let tgt: Vec<usize> = (0..5).map(|_| 3 + rng.below(37)).collect();
        let seg = Segment::new(src, tgt).unwrap();
        let z = encode(&seg.source, &p, &c, Mode::Eval).unwrap();
        let (loss, logits) = decode_train(&seg, &z, &p, &c, 0.0, Mode::Eval).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(logits.shape(), &[6, 40]);
        total += loss;
    }
    let mean = total / 20.0;
    let ln_v = 40f64.ln();
    assert!(
        (mean - ln_v).abs() < 0.15 * ln_v,
        "mean loss {mean} vs ln V {ln_v}"
    );
}

#[test]
fn decoder_is_causal_over_all_short_targets() {
    let c = tiny();
    let p = params(&c, 7);
    let source = [4, 5, 6];
    let z = encode(&source, &p, &c, Mode::Eval).unwrap();
    // Exhaustive over targets of length ≤ 4 drawn from a 3-token toy vocabulary.
    let toy = [3usize, 5, 8];
    for len in 1..=4usize {
        for code in 0..toy.len().pow(len as u32) {
            let target: Vec<usize> = (0..len)
                .map(|i| toy[(code / toy.len().pow(i as u32)) % toy.len()])
                .collect();
            let seg = Segment::new(source.to_vec(), target.clone()).unwrap();
            let (_, base) = decode_train(&seg, &z, &p, &c, 0.0, Mode::Eval).unwrap();
            for j in 0..len {
                let mut changed = target.clone();
                changed[j] = if changed[j] == 3 { 4 } else { 3 };
                let seg2 = Segment::new(source.to_vec(), changed).unwrap();
                let (_, other) = decode_train(&seg2, &z, &p, &c, 0.0, Mode::Eval).unwrap();
                for pos in 0..=j {
                    assert_eq!(base.row(pos), other.row(pos), "len={len} j={j} pos={pos}");
                }
                assert_ne!(base.row(j + 1), other.row(j + 1));
            }
        }
    }
}

/// Zero final-norm gain makes the decoder output the bias row at every position.
fn constant_output_model(logits: &[f64]) -> (ModelConfig, ParameterSet<f64>) {
    let mut c = tiny();
    c.tgt_vocab = logits.len();
    let mut p = params(&c, 8);
    let last = c.dec_layers - 1;
    let gain = p.get_mut(&format!("dec.{last}.norm.gain")).unwrap();
    gain.values_mut().iter_mut().for_each(|v| *v = 0.0);
    let bias = p.get_mut(&format!("dec.{last}.norm.bias")).unwrap();
    bias.values_mut().iter_mut().for_each(|v| *v = 0.0);
    bias.values_mut()[0] = 1.0;
    let out = p.get_mut(OUTPUT_PROJECTION).unwrap();
    out.values_mut().iter_mut().for_each(|v| *v = 0.0);
    for (i, &l) in logits.iter().enumerate() {
        out.row_mut(i)[0] = l;
    }
    (c, p)
}

#[test]
fn greedy_stops_immediately_when_eos_dominates() {
    let (c, p) = constant_output_model(&[0.0, 0.0, 50.0, 1.0, 1.0]);
    assert!(greedy_decode(&[4, 5], &p, &c, 10).unwrap().is_empty());
}

#[test]
fn greedy_breaks_ties_by_lowest_id_and_respects_max_steps() {
    let (c, p) = constant_output_model(&[0.0, 0.0, -5.0, 3.0, 3.0]);
    assert_eq!(greedy_decode(&[4, 5], &p, &c, 4).unwrap(), vec![3, 3, 3, 3]);
    let p2 = params(&tiny(), 9);
    let a = greedy_decode(&[4, 5, 6], &p2, &tiny(), 6).unwrap();
    assert_eq!(a, greedy_decode(&[4, 5, 6], &p2, &tiny(), 6).unwrap());
    assert!(a.len() <= 6);
}

#[test]
fn perplexity_examples() {
    // Uniform logits: perplexity equals the vocabulary size.
    let (c, p) = constant_output_model(&[0.0; 6]);
    let seg = Segment::new(vec![4], vec![3, 5]).unwrap();
    assert_relative_eq!(perplexity(&seg, &p, &c).unwrap(), 6.0, epsilon = 1e-12);

    // Every label is EOS and EOS dominates: perplexity 1.
    let (c, p) = constant_output_model(&[0.0, 0.0, 800.0, 0.0]);
    let seg = Segment::new(vec![4], vec![2]).unwrap();
    assert_relative_eq!(perplexity(&seg, &p, &c).unwrap(), 1.0, epsilon = 1e-12);

    // p = [1,1,2,4]/8; labels [3, EOS] cost ln 2 and ln 4, so ppl = 2^1.5.
    let (c, p) = constant_output_model(&[0.0, 0.0, 2f64.ln(), 4f64.ln()]);
    let seg = Segment::new(vec![4], vec![3]).unwrap();
    assert_relative_eq!(
        perplexity(&seg, &p, &c).unwrap(),
        2f64.powf(1.5),
        epsilon = 1e-12
    );
}

#[test]
fn segment_rejects_empty_sides() {
    assert!(matches!(
        Segment::new(vec![], vec![3]),
        Err(Error::Length(_))
    ));
    assert!(matches!(
        Segment::new(vec![3], vec![]),
        Err(Error::Length(_))
    ));
}

#[test]
fn eval_mode_loss_is_pure() {
    let c = tiny();
    let p = params(&c, 10);
    let seg = Segment::new(vec![4, 5, 6], vec![3, 7, 8]).unwrap();
    let a = segment_loss(&p, &c, &seg, 0.1, Mode::Eval, None).unwrap();
    let b = segment_loss(&p, &c, &seg, 0.1, Mode::Eval, None).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
