//! Instruction finetuning with gist insertion, plus the control conditions.

mod layout;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use layout::{build_batch, Batch, Condition, Layout};

use crate::cache::{cache_instruction, cache_key, compress_prompt, CacheStore, CacheStrategy};
use crate::evaluation::{distillation_gap_example, rouge_l, GapView};
use crate::model::{generate, param_nodes, save_checkpoint, trace, GistInit, ModelConfig, Params, Prefix};
use crate::numeric::rng::{derive_seed, rng};
use crate::numeric::{warmup_cosine, AdamW, Graph, Tensor};
use crate::taskgen::{Corpus, InstructionExample, Split, Tokenizer, EOS, GIST, PAD};
use crate::{util, Error, Result};

/// Gist counts covered by the standard k sweep.
pub const SWEEP_KS: [usize; 4] = [1, 2, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub condition: Condition,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Cap on examples per split during periodic evaluation.
    pub eval_limit: usize,
    /// Architecture; vocabulary size and control ids are taken from the
    /// corpus tokenizer at train time.
    pub model: ModelConfig,
    pub gist_init: GistInit,
}

impl TrainConfig {
    /// Generic toy preset (batch 32, lr 3e-4, 3% warmup, 2000 steps).
    pub fn toy(condition: Condition, k: usize) -> Self {
        TrainConfig {
            k,
            condition,
            steps: 2000,
            batch_size: 32,
            learning_rate: 3e-4,
            warmup_fraction: 0.03,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            log_every: 50,
            eval_every: 0,
            eval_limit: 64,
            model: ModelConfig::toy(),
            gist_init: GistInit::Mean,
        }
    }

    /// Desk-scale preset: the toy architecture with a step budget and peak
    /// learning rate calibrated so four conditions train in under half an
    /// hour on one CPU core.
    pub fn desk(condition: Condition, k: usize) -> Self {
        TrainConfig { steps: 1500, learning_rate: 7e-4, log_every: 100, ..Self::toy(condition, k) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)");
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }

    /// The architecture with the corpus vocabulary filled in.
    pub fn model_for(&self, tokenizer: &Tokenizer) -> Result<ModelConfig> {
        let cfg = ModelConfig { vocab_size: tokenizer.vocab_size(), gist_id: GIST, pad_id: PAD, ..self.model };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trained weights with everything needed to lay out prompts.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub cfg: ModelConfig,
    pub params: Params,
    pub condition: Condition,
    pub k: usize,
}

impl TrainedModel {
    pub fn layout<'a>(&self, tokenizer: &'a Tokenizer, keywords: Option<&'a BTreeMap<String, u32>>) -> Layout<'a> {
        Layout { condition: self.condition, k: self.k, tokenizer, keywords }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    /// Exact match against the gold output.
    pub accuracy: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metrics: BTreeMap<Split, SplitMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub num_params: usize,
    pub loss_curve: Vec<LossPoint>,
    pub evals: Vec<EvalPoint>,
    /// Final metrics on every evaluation split present in the corpus.
    pub metrics: BTreeMap<Split, SplitMetrics>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_secs: f64,
}

/// Output budget for greedy decoding.
const MAX_NEW_TOKENS: usize = 24;

/// Greedy continuation of the example's prompt, decoded to text.
pub fn predict(model: &TrainedModel, layout: &Layout<'_>, ex: &InstructionExample) -> Result<String> {
    let prompt = layout.prompt_ids(ex)?;
    let room = model.cfg.max_seq_len.saturating_sub(prompt.len());
    if room == 0 {
        return Err(Error::ContextOverflow { len: prompt.len() + 1, max: model.cfg.max_seq_len });
    }
    let mut out = generate(
        &model.cfg,
        &model.params,
        Prefix::Tokens { ids: &prompt, mode: layout.condition.mask_mode() },
        MAX_NEW_TOKENS.min(room),
        Some(EOS),
    )?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(layout.tokenizer.decode(&out))
}

/// Like [`predict`], but serves the prompt prefix from `store` (keyed by
/// `model_id`, see [`crate::model::model_digest`]): gist models
/// reuse the `k` gist positions of the task, other conditions the full
/// activations of everything before the input.
pub fn predict_cached(
    model: &TrainedModel,
    layout: &Layout<'_>,
    ex: &InstructionExample,
    store: &CacheStore,
    model_id: &[u8; 32],
) -> Result<String> {
    let prompt = layout.prompt_ids(ex)?;
    let suffix_len = layout.tokenizer.encode(&ex.input)?.len() + 1;
    let (cacheable, suffix) = prompt.split_at(prompt.len() - suffix_len);
    let (strategy, source) = match layout.condition {
        Condition::Gist => (CacheStrategy::Gist, &cacheable[..cacheable.len() - model.k]),
        _ => (CacheStrategy::Instruction, cacheable),
    };
    let k = if strategy == CacheStrategy::Gist { model.k } else { 0 };
    let key = cache_key(model_id, strategy, k, source);
    let cache = match store.get(&model.cfg, &key)? {
        Some(c) => c,
        None => {
            let c = match strategy {
                CacheStrategy::Gist => compress_prompt(&model.cfg, &model.params, source, model.k)?,
                _ => cache_instruction(&model.cfg, &model.params, source)?,
            };
            store.put(&model.cfg, model_id, source, &c)?;
            c
        }
    };
    let room = model.cfg.max_seq_len.saturating_sub(prompt.len());
    let mut out = generate(
        &model.cfg,
        &model.params,
        Prefix::Cached { cache: &cache, suffix },
        MAX_NEW_TOKENS.min(room.max(1)),
        Some(EOS),
    )?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(layout.tokenizer.decode(&out))
}

/// Predictions and metrics for `examples`.
pub fn evaluate(
    model: &TrainedModel,
    layout: &Layout<'_>,
    examples: &[&InstructionExample],
) -> Result<(SplitMetrics, Vec<String>)> {
    let mut outputs = Vec::with_capacity(examples.len());
    let (mut hits, mut rouge) = (0usize, 0.0);
    for ex in examples {
        let out = predict(model, layout, ex)?;
        hits += usize::from(out == ex.output);
        let cand: Vec<&str> = out.split_whitespace().collect();
        let gold: Vec<&str> = ex.output.split_whitespace().collect();
        rouge += rouge_l(&cand, &gold)?;
        outputs.push(out);
    }
    let n = examples.len().max(1) as f64;
    Ok((SplitMetrics { n: examples.len(), accuracy: hits as f64 / n, rouge_l: rouge / n }, outputs))
}

fn eval_splits(
    model: &TrainedModel,
    layout: &Layout<'_>,
    corpus: &Corpus,
    limit: Option<usize>,
) -> Result<BTreeMap<Split, SplitMetrics>> {
    let mut out = BTreeMap::new();
    for split in Split::EVAL {
        let xs: Vec<&InstructionExample> = corpus.split(split).take(limit.unwrap_or(usize::MAX)).collect();
        if !xs.is_empty() {
            out.insert(split, evaluate(model, layout, &xs)?.0);
        }
    }
    Ok(out)
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Loss and parameter gradients on one batch.
pub fn loss_and_grads(cfg: &ModelConfig, params: &Params, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let nodes = param_nodes(&mut g, params, true);
    let tr = trace(&mut g, cfg, &nodes, &batch.ids, batch.mask.as_slice().to_vec(), None)?;
    let loss = g.cross_entropy(tr.logits, &batch.targets, &batch.keep)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let out = nodes
        .iter()
        .zip(params.tensors())
        .map(|(&n, p)| grads.take(n).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, out))
}

/// Trains one condition. With `out_dir`, writes `train.log` (appended per
/// logged step), `model.ckpt`, and `report.json` there.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out_dir: Option<&Path>) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let model_cfg = cfg.model_for(&corpus.tokenizer)?;
    let train_set: Vec<&InstructionExample> = corpus.split(Split::Train).collect();
    if train_set.is_empty() || Split::EVAL.iter().any(|&s| corpus.split(s).next().is_none()) {
        return Err(Error::InvalidArgument("corpus needs train, seen, unseen and ood examples".into()));
    }
    let keywords = match cfg.condition {
        Condition::Tfidf => Some(corpus.tfidf_compress()?),
        _ => None,
    };
    let layout = Layout { condition: cfg.condition, k: cfg.k, tokenizer: &corpus.tokenizer, keywords: keywords.as_ref() };

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train.log");
            Some((
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };

    let mut params = Params::init(&model_cfg, &mut rng(derive_seed(cfg.seed, "init")), cfg.gist_init)?;
    let mut order_rng = rng(derive_seed(cfg.seed, "batches"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(cfg.weight_decay);
    let warmup = cfg.warmup_steps();
    let mut model = TrainedModel { cfg: model_cfg, params: params.clone(), condition: cfg.condition, k: cfg.k };
    let mut loss_curve = Vec::new();
    let mut evals = Vec::new();
    let mut running = (0.0, 0usize);

    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let exs: Vec<&InstructionExample> = idx.iter().map(|&i| train_set[i]).collect();
        let batch = build_batch(&exs, &layout, model_cfg.max_seq_len)?;
        let (loss, mut grads) = loss_and_grads(&model_cfg, &params, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        clip_gradients(&mut grads, cfg.grad_clip);
        let lr = warmup_cosine(step, cfg.steps, warmup, cfg.learning_rate);
        opt.step(params.tensors_mut(), &grads, lr);
        running.0 += loss;
        running.1 += 1;

        let last = step + 1 == cfg.steps;
        if step == 0 || (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) || last {
            let mean = running.0 / running.1 as f64;
            running = (0.0, 0);
            loss_curve.push(LossPoint { step, loss: mean });
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "step {step} loss {mean:.6} lr {lr:.3e}").map_err(|e| Error::io(path.clone(), e))?;
            }
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !last {
            model.params = params.clone();
            let metrics = eval_splits(&model, &layout, corpus, Some(cfg.eval_limit))?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "eval {step} {}", metrics_line(&metrics)).map_err(|e| Error::io(path.clone(), e))?;
            }
            evals.push(EvalPoint { step, metrics });
        }
    }
    model.params = params;
    let metrics = eval_splits(&model, &layout, corpus, None)?;
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            save_checkpoint(&path, &model.cfg, &model.params)?;
            Some(path)
        }
        None => None,
    };
    let report = TrainReport {
        config: cfg.clone(),
        num_params: model.params.num_scalars(),
        loss_curve,
        evals,
        metrics,
        checkpoint,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        util::write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "final {}", metrics_line(&report.metrics)).map_err(|e| Error::io(path.clone(), e))?;
        }
    }
    Ok((model, report))
}

fn metrics_line(m: &BTreeMap<Split, SplitMetrics>) -> String {
    let mut s = String::new();
    for (split, v) in m {
        let _ = write!(s, "{split}: acc {:.3} rouge {:.3}  ", v.accuracy, v.rouge_l);
    }
    s.trim_end().to_string()
}

/// Mean distillation gap between a positive-control model and a gist model
/// over `examples`, with gold outputs as the trajectory.
pub fn distillation_gap(
    positive: &TrainedModel,
    gist: &TrainedModel,
    tokenizer: &Tokenizer,
    examples: &[&InstructionExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    let (lp, lg) = (positive.layout(tokenizer, None), gist.layout(tokenizer, None));
    let mut total = 0.0;
    for ex in examples {
        let (pos_ids, n) = lp.sequence(ex)?;
        let (gist_ids, _) = lg.sequence(ex)?;
        let teacher = GapView { cfg: &positive.cfg, params: &positive.params, ids: &pos_ids, mode: lp.condition.mask_mode() };
        let student = GapView { cfg: &gist.cfg, params: &gist.params, ids: &gist_ids, mode: lg.condition.mask_mode() };
        total += distillation_gap_example(&teacher, &student, n)?;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub compression: f64,
    pub metrics: BTreeMap<Split, SplitMetrics>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub all_completed: bool,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4} {:>8} {:>8} {:>8} {:>8} {:>10}", "k", "compr", "seen", "unseen", "ood", "loss");
        for r in &self.rows {
            let acc = |sp| r.metrics.get(&sp).map_or(f64::NAN, |m: &SplitMetrics| m.accuracy);
            let _ = writeln!(
                s,
                "{:>4} {:>7.1}x {:>8.3} {:>8.3} {:>8.3} {:>10.4}",
                r.k,
                r.compression,
                acc(Split::Seen),
                acc(Split::Unseen),
                acc(Split::Ood),
                r.final_loss
            );
        }
        s
    }
}

/// Trains one gist model per `k` from the same base config and seed.
pub fn k_sweep(base: &TrainConfig, ks: &[usize], corpus: &Corpus) -> Result<(SweepReport, Vec<TrainReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &k in ks {
        let cfg = TrainConfig { k, condition: Condition::Gist, ..base.clone() };
        let (_, report) = train(&cfg, corpus, None)?;
        rows.push(sweep_row(corpus, &report)?);
        reports.push(report);
    }
    Ok((SweepReport { all_completed: rows.len() == ks.len(), rows }, reports))
}

/// Collates one finished gist run into a sweep row.
pub fn sweep_row(corpus: &Corpus, report: &TrainReport) -> Result<SweepRow> {
    Ok(SweepRow {
        k: report.config.k,
        compression: corpus.compression_factor(Split::Train, report.config.k)?,
        metrics: report.metrics.clone(),
        final_loss: report.loss_curve.last().map_or(f64::NAN, |p| p.loss),
    })
}
