use std::collections::BTreeSet;

use approx::assert_relative_eq;
use offset_nmt::adapt::*;
use offset_nmt::data::ParallelCorpus;
use offset_nmt::model::{init_parameters, ModelConfig, Region, Segment, OUTPUT_PROJECTION};
use offset_nmt::tensor::{ParameterSet, RandomSource, Tensor};
use offset_nmt::Error;
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        src_vocab: 14,
        tgt_vocab: 12,
        d_model: 8,
        enc_layers: 2,
        dec_layers: 1,
        enc_filter: 16,
        heads: 2,
        max_len: 32,
        dropout: 0.1,
    }
}

fn tiny_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = RandomSource::new(seed);
    (0..n)
        .map(|_| {
            let len = rng.range_inclusive(2, 5);
            let src: Vec<usize> = (0..len).map(|_| rng.range_inclusive(4, 13)).collect();
            let tgt: Vec<usize> = src.iter().map(|&s| 4 + (s + 3) % 8).collect();
            Segment::new(src, tgt).unwrap()
        })
        .collect()
}

fn baseline(model: &ModelConfig) -> ParameterSet<f64> {
    init_parameters(model, &mut RandomSource::new(7)).unwrap()
}

fn named(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> OffsetSet<f64> {
    let mut o = OffsetSet::from_layout(
        entries
            .iter()
            .map(|(n, s, _)| (n.to_string(), s.clone()))
            .collect(),
    )
    .unwrap();
    for (n, s, v) in entries {
        o.set(
            n,
            OffsetEntry::Dense(Tensor::new(s.clone(), v.clone()).unwrap()),
        )
        .unwrap();
    }
    o
}

#[test]
fn penalty_of_half_filled_two_by_two() {
    let one = named(&[("a", vec![2, 2], vec![0.5; 4])]);
    assert_relative_eq!(group_lasso_penalty(&one), 2.0, epsilon = 1e-15);
    let two = named(&[
        ("a", vec![2, 2], vec![0.5; 4]),
        ("b", vec![2, 2], vec![0.5; 4]),
    ]);
    assert_relative_eq!(group_lasso_penalty(&two), 4.0, epsilon = 1e-15);
    assert_eq!(
        group_lasso_penalty(&OffsetSet::<f64>::from_layout(vec![("z".into(), vec![3])]).unwrap()),
        0.0
    );
}

#[test]
fn scalar_subgradient_has_unit_magnitude() {
    let o = named(&[("a", vec![1, 1], vec![0.3])]);
    let cfg = GroupLassoConfig {
        lambda: 1.0,
        ..Default::default()
    };
    let g = group_lasso_subgradient(&o, &cfg).unwrap();
    assert_relative_eq!(g.entry(0).stored_values()[0], 1.0, epsilon = 1e-15);
}

#[test]
fn subgradient_direction_is_scale_invariant() {
    let cfg = GroupLassoConfig {
        lambda: 0.1,
        ..Default::default()
    };
    let v = vec![0.2, -0.1, 0.4];
    let a = group_lasso_subgradient(&named(&[("a", vec![3], v.clone())]), &cfg).unwrap();
    let b = group_lasso_subgradient(
        &named(&[("a", vec![3], v.iter().map(|x| x * 7.0).collect())]),
        &cfg,
    )
    .unwrap();
    for (x, y) in a
        .entry(0)
        .stored_values()
        .iter()
        .zip(b.entry(0).stored_values())
    {
        assert_relative_eq!(x, y, epsilon = 1e-15);
    }
}

#[test]
fn clipping_examples() {
    let cfg = GroupLassoConfig::default();
    let small = vec![5e-5, -5e-5, 5e-5, -5e-5];
    let o = named(&[
        ("enc.0.filter.w1", vec![2, 2], small.clone()),
        (OUTPUT_PROJECTION, vec![2, 2], small),
    ]);
    let c = clip_offsets(&o, &cfg).unwrap();
    assert!(c.get("enc.0.filter.w1").unwrap().is_zero());
    assert_eq!(c.get(OUTPUT_PROJECTION), o.get(OUTPUT_PROJECTION));
    let kept = named(&[("enc.0.filter.w1", vec![2, 2], vec![2e-4; 4])]);
    assert_eq!(clip_offsets(&kept, &cfg).unwrap(), kept);
}

#[test]
fn fixed_selection_examples() {
    let o = named(&[
        ("a", vec![2], vec![0.003, -0.003]),
        ("b", vec![2], vec![0.001, 0.001]),
    ]);
    assert_eq!(
        select_fixed_tensors(&o, 0.002).unwrap(),
        ["a".to_string()].into_iter().collect()
    );
    let zero = OffsetSet::<f64>::from_layout(vec![("a".into(), vec![2])]).unwrap();
    assert!(select_fixed_tensors(&zero, 0.002).unwrap().is_empty());
}

#[test]
fn observed_vocab_includes_specials() {
    let model = tiny_model();
    let p = baseline(&model);
    let mut o = OffsetSet::zeros_for(&p);
    o.set(
        OUTPUT_PROJECTION,
        OffsetEntry::Dense(Tensor::filled(vec![12, 8], 0.1).unwrap()),
    )
    .unwrap();
    let corpus = ParallelCorpus::new(vec![Segment::new(vec![5], vec![3, 7]).unwrap()]).unwrap();
    let r = restrict_to_observed_vocab(&o, &corpus).unwrap();
    match r.get(OUTPUT_PROJECTION).unwrap() {
        OffsetEntry::SparseRows(s) => assert_eq!(s.row_ids(), &[1, 2, 3, 7]),
        e => panic!("unexpected {e:?}"),
    }
    assert!(r.get("src_embedding").unwrap().is_zero());
}

#[test]
fn update_schedule_stops_on_low_perplexity() {
    let stats = run_update_schedule(3, 1.5, || Ok(1.4)).unwrap();
    assert_eq!(stats.updates, 1);
    let stats = run_update_schedule(3, 1.5, || Ok(5.0)).unwrap();
    assert_eq!(stats.updates, 3);
    let mut ppl = [3.0, 1.5, 1.0].into_iter();
    let stats = run_update_schedule(3, 1.5, || Ok(ppl.next().unwrap())).unwrap();
    assert_eq!(stats.perplexities, vec![3.0, 1.5]);
}

#[test]
fn output_projection_only_adaptation() {
    let model = tiny_model();
    let p = baseline(&model);
    let corpus = tiny_corpus(20, 1);
    let mut cfg = Method::Region(Region::OutputProjection).configure(AdaptationConfig::batch());
    cfg.epochs = 2;
    cfg.batch_tokens = 40;
    let before = p.clone();
    let o = batch_adapt(&p, &model, &corpus, &cfg).unwrap();
    assert_eq!(p, before);
    assert_eq!(o.nonzero_names(), vec![OUTPUT_PROJECTION]);
}

#[test]
fn zero_learning_rate_gives_zero_offsets() {
    let model = tiny_model();
    let p = baseline(&model);
    let cfg = AdaptationConfig {
        lr: 0.0,
        epochs: 1,
        ..AdaptationConfig::batch()
    };
    assert!(batch_adapt(&p, &model, &tiny_corpus(5, 2), &cfg)
        .unwrap()
        .is_all_zero());
}

#[test]
fn empty_corpora_and_wrong_modes_are_rejected() {
    let model = tiny_model();
    let p = baseline(&model);
    let empty = ParallelCorpus::new(vec![]).unwrap();
    assert!(matches!(
        batch_adapt(&p, &model, &empty, &AdaptationConfig::batch()),
        Err(Error::Data(_))
    ));
    let zero = OffsetSet::zeros_for(&p);
    assert!(matches!(
        incremental_adapt(
            &p,
            &model,
            zero.clone(),
            &empty,
            &AdaptationConfig::incremental()
        ),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        incremental_adapt(
            &p,
            &model,
            zero,
            &tiny_corpus(2, 1),
            &AdaptationConfig::batch()
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn sparse_vocab_leaves_unseen_output_rows_untouched() {
    let model = tiny_model();
    let p = baseline(&model);
    // targets never use ids 10 and 11
    let corpus: ParallelCorpus = tiny_corpus(15, 3)
        .iter()
        .map(|s| {
            Segment::new(
                s.source.clone(),
                s.target.iter().map(|&t| t.min(9)).collect(),
            )
            .unwrap()
        })
        .collect();
    let mut cfg = Method::Fixed(BTreeSet::new()).configure(AdaptationConfig::batch());
    cfg.epochs = 2;
    let o = batch_adapt(&p, &model, &corpus, &cfg).unwrap();
    let eff = compose(&p, &o).unwrap();
    for row in [0, 3, 10, 11] {
        assert_eq!(
            eff.get(OUTPUT_PROJECTION).unwrap().row(row),
            p.get(OUTPUT_PROJECTION).unwrap().row(row)
        );
    }
    assert_ne!(
        eff.get(OUTPUT_PROJECTION).unwrap().row(5),
        p.get(OUTPUT_PROJECTION).unwrap().row(5)
    );
}

#[test]
fn incremental_translations_ignore_later_references() {
    let model = tiny_model();
    let p = baseline(&model);
    let test = tiny_corpus(6, 4);
    let cfg = AdaptationConfig {
        lr: 0.5,
        ..AdaptationConfig::incremental()
    };
    let run = |c: &ParallelCorpus| {
        incremental_adapt(&p, &model, OffsetSet::zeros_for(&p), c, &cfg).unwrap()
    };
    let clean = run(&test);
    assert_eq!(clean.translations.len(), 6);
    assert!(clean.stats.iter().all(|s| (1..=3).contains(&s.updates)));
    for i in 0..5 {
        let corrupted: ParallelCorpus = test
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if k > i {
                    Segment::new(s.source.clone(), vec![4; 7]).unwrap()
                } else {
                    s.clone()
                }
            })
            .collect();
        assert_eq!(run(&corrupted).translations[..=i], clean.translations[..=i]);
    }
}

#[test]
fn combined_mode_continues_from_batch_offsets() {
    let model = tiny_model();
    let p = baseline(&model);
    let mut cfg = Method::Region(Region::InnerLayers).configure(AdaptationConfig::batch());
    cfg.epochs = 1;
    let out = combined_adapt(&p, &model, &tiny_corpus(10, 5), &tiny_corpus(3, 6), &cfg).unwrap();
    assert_eq!(out.translations.len(), 3);
    let count = offset_param_count(&out.offsets, &model).unwrap();
    assert_eq!(count.total, count.per_region[&Region::InnerLayers]);
}

fn offsets_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<f64>)>> {
    prop::collection::vec((1usize..4, 1usize..5), 1..4).prop_flat_map(|shapes| {
        shapes
            .into_iter()
            .map(|(r, c)| {
                prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |v| (vec![r, c], v))
            })
            .collect::<Vec<_>>()
    })
}

fn build(entries: &[(Vec<usize>, Vec<f64>)]) -> OffsetSet<f64> {
    let named_entries: Vec<(String, Vec<usize>, Vec<f64>)> = entries
        .iter()
        .enumerate()
        .map(|(i, (s, v))| (format!("t{i}"), s.clone(), v.clone()))
        .collect();
    let refs: Vec<(&str, Vec<usize>, Vec<f64>)> = named_entries
        .iter()
        .map(|(n, s, v)| (n.as_str(), s.clone(), v.clone()))
        .collect();
    named(&refs)
}

proptest! {
    #[test]
    fn penalty_matches_brute_force(entries in offsets_strategy()) {
        let o = build(&entries);
        let mut brute = 0.0;
        for (shape, v) in &entries {
            let size: usize = shape.iter().product();
            let mut sq = 0.0;
            for x in v {
                sq += x * x;
            }
            brute += (size as f64).sqrt() * sq.sqrt();
        }
        let got = group_lasso_penalty(&o);
        prop_assert!((got - brute).abs() <= 1e-12 * brute.abs().max(1e-300));
    }

    #[test]
    fn subgradient_matches_finite_differences(entries in offsets_strategy(), lambda in 1e-3f64..1.0) {
        let o = build(&entries);
        let cfg = GroupLassoConfig { lambda, ..Default::default() };
        prop_assume!((0..o.len()).all(|i| o.entry(i).l2_norm() >= 1e-3));
        let g = group_lasso_subgradient(&o, &cfg).unwrap();
        let h = 1e-6;
        for (t, (shape, v)) in entries.iter().enumerate() {
            for k in 0..v.len() {
                let eval = |delta: f64| {
                    let mut e = entries.clone();
                    e[t].1[k] += delta;
                    lambda * group_lasso_penalty(&build(&e))
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.entry(t).stored_values()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                prop_assert!(rel < 1e-5, "tensor {t} {shape:?} entry {k}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn clipping_is_idempotent(entries in offsets_strategy(), scale in 1e-6f64..1e-3, theta in 0.0f64..1e-3) {
        let scaled: Vec<_> = entries.iter().map(|(s, v)| (s.clone(), v.iter().map(|x| x * scale).collect())).collect();
        let cfg = GroupLassoConfig { theta, ..Default::default() };
        let once = clip_offsets(&build(&scaled), &cfg).unwrap();
        prop_assert_eq!(clip_offsets(&once, &cfg).unwrap(), once);
    }

    #[test]
    fn restriction_commutes_with_composition(seed in 0u64..1000, n in 1usize..4) {
        let model = tiny_model();
        let p = baseline(&model);
        let mut rng = RandomSource::new(seed);
        let mut o = OffsetSet::zeros_for(&p);
        for name in ["src_embedding", "tgt_embedding", OUTPUT_PROJECTION] {
            let shape = p.get(name).unwrap().shape().to_vec();
            let values = (0..shape.iter().product()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            o.set(name, OffsetEntry::Dense(Tensor::new(shape, values).unwrap())).unwrap();
        }
        let corpus = tiny_corpus(n, seed);
        let restricted = compose(&p, &restrict_to_observed_vocab(&o, &corpus).unwrap()).unwrap();
        let mut expected = compose(&p, &o).unwrap();
        let (src, tgt) = (corpus.observed_source_ids(), corpus.observed_target_ids());
        for (name, keep) in [("src_embedding", &src), ("tgt_embedding", &tgt), (OUTPUT_PROJECTION, &tgt)] {
            let base = p.get(name).unwrap().clone();
            let t = expected.get_mut(name).unwrap();
            for i in 0..t.rows() {
                if !keep.contains(&i) {
                    t.row_mut(i).copy_from_slice(base.row(i));
                }
            }
        }
        prop_assert_eq!(restricted, expected);
    }
}
