use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use offset_nmt::adapt::{
    batch_adapt_from, incremental_adapt, max_decode_len, offset_param_count, select_fixed_tensors,
    AdaptMode, AdaptationConfig, GroupLassoConfig, Method, OffsetSet,
};
use offset_nmt::data::{
    generate_synthetic, load_parallel, write_parallel, ParallelCorpus, SyntheticTaskConfig,
    Vocabulary,
};
use offset_nmt::metrics::{bleu, repetition_rate};
use offset_nmt::model::{greedy_decode, param_count, ModelConfig, Region};
use offset_nmt::persist::{
    load_checkpoint, load_offsets, save_checkpoint, save_offsets, OffsetFile,
};
use offset_nmt::training::{corpus_bleu, corpus_perplexity, train_baseline, BaselineTrainConfig};
use offset_nmt::Params32;

use crate::{
    AdaptArgs, EvaluateArgs, GenDataArgs, MetricArg, ModeArg, ReportArgs, TrainArgs, TranslateArgs,
};

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn vocabs(dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
    Ok((
        Vocabulary::load(&dir.join("src.vocab"))?,
        Vocabulary::load(&dir.join("tgt.vocab"))?,
    ))
}

fn load_corpus(prefix: &Path, src: &Vocabulary, tgt: &Vocabulary) -> Result<ParallelCorpus> {
    load_parallel(&with_ext(prefix, "src"), &with_ext(prefix, "tgt"), src, tgt)
        .with_context(|| format!("loading corpus {}", prefix.display()))
}

fn read_tokenized(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| vocab.tokenize(l)).collect())
}

fn read_words(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn write_lines(path: &Path, lines: &[Vec<usize>], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&vocab.detokenize(l));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

/// Baseline plus optional offsets, checked against each other.
fn load_model(checkpoint: &Path, offsets: Option<&Path>) -> Result<(ModelConfig, Params32)> {
    let (config, baseline) = load_checkpoint::<f32>(checkpoint)?;
    let params = match offsets {
        Some(path) => load_offsets::<f32>(path, &config)?.compose(&baseline, &config)?,
        None => baseline,
    };
    Ok((config, params))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SyntheticTaskConfig {
        vocab_size: a.vocab_size,
        min_len: a.min_len,
        max_len: a.max_len,
        baseline_size: a.baseline_size,
        adapt_size: a.adapt_size,
        test_size: a.test_size,
        heldout_size: a.heldout_size,
        shift_fraction: a.shift,
        repeat_fraction: a.repeat,
        seed: a.seed,
    };
    let task = generate_synthetic(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    task.src_vocab.save(&a.out.join("src.vocab"))?;
    task.tgt_vocab.save(&a.out.join("tgt.vocab"))?;
    for (name, corpus) in [
        ("baseline", &task.baseline),
        ("heldout", &task.heldout),
        ("adapt", &task.adapt),
        ("test", &task.test),
    ] {
        let prefix = a.out.join(name);
        write_parallel(
            &with_ext(&prefix, "src"),
            &with_ext(&prefix, "tgt"),
            corpus,
            &task.src_vocab,
            &task.tgt_vocab,
        )?;
        println!(
            "corpus={name} segments={} tokens={}",
            corpus.len(),
            corpus.num_tokens()
        );
    }
    println!("shifted_tokens={}", cfg.shifted_tokens());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (src, tgt) = vocabs(&a.vocab.vocab_dir)?;
    let corpus = load_corpus(&a.corpus, &src, &tgt)?;
    let model = ModelConfig {
        src_vocab: src.len(),
        tgt_vocab: tgt.len(),
        d_model: a.d_model,
        enc_layers: a.enc_layers,
        dec_layers: a.dec_layers,
        enc_filter: a.filter,
        heads: a.heads,
        max_len: a.max_len,
        dropout: a.dropout,
    };
    let cfg = BaselineTrainConfig {
        epochs: a.epochs,
        batch_tokens: a.batch_tokens,
        lr: a.lr,
        dropout: a.dropout,
        eps_ls: a.label_smoothing,
        seed: a.seed,
        ..Default::default()
    };
    let params: Params32 = train_baseline(&corpus, &model, &cfg, |epoch, loss| {
        println!("epoch={epoch} loss={loss:.4}")
    })?;
    save_checkpoint(&a.out, &params, &model)?;
    println!(
        "params={} checkpoint={}",
        params.num_values(),
        a.out.display()
    );
    Ok(())
}

fn method(a: &AdaptArgs, baseline: &Params32, model: &ModelConfig) -> Result<Method> {
    Ok(match a.method.as_str() {
        "fixed" => {
            let Some(path) = &a.fixed_from else {
                bail!("--method fixed needs --fixed-from <dev offsets>")
            };
            let dev = load_offsets::<f32>(path, model)?;
            dev.check_baseline(baseline, model)?;
            Method::Fixed(select_fixed_tensors(&dev.offsets, a.fixed_threshold)?)
        }
        "lasso" => Method::Lasso(GroupLassoConfig {
            lambda: a.lambda,
            theta: a.theta,
            ..Default::default()
        }),
        other => other.parse()?,
    })
}

fn overrides(a: &AdaptArgs, mut cfg: AdaptationConfig) -> AdaptationConfig {
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_tokens = a.batch_tokens.unwrap_or(cfg.batch_tokens);
    cfg.dropout = a.dropout.unwrap_or(cfg.dropout);
    cfg.eps_ls = a.label_smoothing.unwrap_or(cfg.eps_ls);
    cfg.max_updates_per_segment = a.max_updates.unwrap_or(cfg.max_updates_per_segment);
    cfg.ppl_stop = a.ppl_stop.unwrap_or(cfg.ppl_stop);
    cfg.sparse_vocab |= a.sparse_vocab;
    cfg.seed = a.seed;
    cfg
}

pub fn adapt(a: AdaptArgs) -> Result<()> {
    let (src, tgt) = vocabs(&a.vocab.vocab_dir)?;
    let (model, baseline) = load_checkpoint::<f32>(&a.checkpoint)?;
    let method = method(&a, &baseline, &model)?;
    let base_cfg = |mode| {
        let cfg = match mode {
            AdaptMode::Batch => AdaptationConfig::batch(),
            AdaptMode::Incremental => AdaptationConfig::incremental(),
        };
        overrides(&a, method.configure(cfg))
    };
    let corpus = |p: &Option<PathBuf>, flag: &str| -> Result<ParallelCorpus> {
        match p {
            Some(p) => load_corpus(p, &src, &tgt),
            None => bail!("this mode needs --{flag}"),
        }
    };
    let mut offsets = OffsetSet::zeros_for(&baseline);
    if matches!(a.mode, ModeArg::Batch | ModeArg::Combined) {
        let cfg = base_cfg(AdaptMode::Batch);
        offsets = batch_adapt_from(
            &baseline,
            &model,
            offsets,
            &corpus(&a.adapt, "adapt")?,
            &cfg,
            |e, l| println!("epoch={e} loss={l:.4}"),
        )?;
    }
    if matches!(a.mode, ModeArg::Incremental | ModeArg::Combined) {
        let test = corpus(&a.test, "test")?;
        let cfg = base_cfg(AdaptMode::Incremental);
        let out = incremental_adapt(&baseline, &model, offsets, &test, &cfg)?;
        let updates: usize = out.stats.iter().map(|s| s.updates).sum();
        let score = bleu(&out.translations, &test.targets())?.score;
        println!(
            "segments={} updates={updates} incremental_bleu={score:.2}",
            test.len()
        );
        if let Some(path) = &a.translations {
            write_lines(path, &out.translations, &tgt)?;
        }
        offsets = out.offsets;
    }
    let count = offset_param_count(&offsets, &model)?;
    save_offsets(&a.out, &OffsetFile::new(offsets, &baseline, &model)?)?;
    println!(
        "method={method} stored={} offsets={}",
        count.total,
        a.out.display()
    );
    Ok(())
}

pub fn translate(a: TranslateArgs) -> Result<()> {
    let (src, tgt) = vocabs(&a.vocab.vocab_dir)?;
    let (model, params) = load_model(&a.checkpoint, a.offsets.as_deref())?;
    let sources = read_tokenized(&a.input, &src)?;
    let mut hyps = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        if s.is_empty() {
            bail!("empty source line {}", i + 1);
        }
        hyps.push(greedy_decode(s, &params, &model, max_decode_len(s.len()))?);
    }
    write_lines(&a.output, &hyps, &tgt)?;
    println!("segments={} output={}", hyps.len(), a.output.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
        p.clone()
            .with_context(|| format!("--metric needs --{flag}"))
    };
    match a.metric {
        MetricArg::Bleu => {
            let hyps = read_words(&need(&a.hyp, "hyp")?)?;
            let refs = read_words(&need(&a.reference, "reference")?)?;
            let r = bleu(&hyps, &refs)?;
            println!(
                "bleu={:.4} bp={:.4} p1={:.4} p2={:.4} p3={:.4} p4={:.4} hyp_len={} ref_len={}",
                r.score,
                r.brevity_penalty,
                r.precisions[0],
                r.precisions[1],
                r.precisions[2],
                r.precisions[3],
                r.hyp_len,
                r.ref_len
            );
        }
        MetricArg::Rr => {
            let text: Vec<String> = read_words(&need(&a.reference, "reference")?)?.concat();
            let r = repetition_rate(&text, a.window)?;
            println!("rr={:.4} windows={} window={}", r.rate, r.windows, r.window);
        }
        MetricArg::Ppl => {
            let (src, tgt) = vocabs(&need(&a.vocab_dir, "vocab-dir")?)?;
            let (model, params) =
                load_model(&need(&a.checkpoint, "checkpoint")?, a.offsets.as_deref())?;
            let corpus = load_corpus(&need(&a.corpus, "corpus")?, &src, &tgt)?;
            println!(
                "ppl={:.4} segments={}",
                corpus_perplexity(&corpus, &params, &model)?,
                corpus.len()
            );
        }
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let (model, baseline) = load_checkpoint::<f32>(&a.checkpoint)?;
    let test = match (&a.test, &a.vocab_dir) {
        (Some(t), Some(v)) => {
            let (src, tgt) = vocabs(v)?;
            Some(load_corpus(t, &src, &tgt)?)
        }
        (Some(_), None) => bail!("--test needs --vocab-dir"),
        _ => None,
    };
    let total_model = param_count(&model).total;
    let columns = [
        Region::OuterLayers,
        Region::InnerLayers,
        Region::EncoderEmbedding,
        Region::DecoderEmbedding,
        Region::OutputProjection,
    ];
    let mut rows = Vec::new();
    let baseline_bleu = match &test {
        Some(t) => Some(corpus_bleu(t, &baseline, &model)?.score),
        None => None,
    };
    println!(
        "method=baseline model_params={total_model}{}",
        fmt_bleu(baseline_bleu)
    );
    for pair in &a.offsets {
        let Some((label, path)) = pair.split_once('=') else {
            bail!("--offsets expects LABEL=PATH, got `{pair}`")
        };
        let file = load_offsets::<f32>(Path::new(path), &model)?;
        let count = offset_param_count(&file.offsets, &model)?;
        let score = match &test {
            Some(t) => Some(corpus_bleu(t, &file.compose(&baseline, &model)?, &model)?.score),
            None => None,
        };
        let regions: Vec<String> = columns
            .iter()
            .map(|r| format!("{r}={}", count.per_region[r]))
            .collect();
        println!(
            "method={label} stored={} fraction={:.4} nonzero_tensors={} {}{}",
            count.total,
            count.total as f64 / total_model as f64,
            file.offsets.nonzero_count(),
            regions.join(" "),
            fmt_bleu(score)
        );
        rows.push((label.to_string(), count, score));
    }
    println!();
    println!(
        "{:<16} {:>12} {:>9} {:>8}",
        "method", "stored", "% model", "BLEU"
    );
    println!(
        "{:<16} {:>12} {:>9} {:>8}",
        "baseline",
        0,
        "0.0",
        table_bleu(baseline_bleu)
    );
    for (label, count, score) in rows {
        let pct = 100.0 * count.total as f64 / total_model as f64;
        println!(
            "{label:<16} {:>12} {pct:>9.1} {:>8}",
            count.total,
            table_bleu(score)
        );
    }
    Ok(())
}

fn fmt_bleu(score: Option<f64>) -> String {
    score.map(|s| format!(" bleu={s:.2}")).unwrap_or_default()
}

fn table_bleu(score: Option<f64>) -> String {
    score
        .map(|s| format!("{s:.2}"))
        .unwrap_or_else(|| "-".into())
}
