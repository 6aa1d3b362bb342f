//! Reproducible data → train → eval → bench runs recorded in a manifest.
//!
//! Every stage records a digest of its inputs and of each output file. A
//! stage whose input digest is unchanged and whose outputs still match is
//! skipped; an output that no longer matches its recorded digest is a hard
//! error naming the stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{compare_storage, StorageComparison};
use crate::evaluation::{exact_match_rate, judge_all, normalize, win_rate, write_judgments, WinRateReport};
use crate::flops::{self, caching_comparison, Accounting, CachingComparison};
use crate::model::load_checkpoint;
use crate::numeric::rng::derive_seed;
use crate::taskgen::{generate_corpus, Corpus, CorpusSpec, InstructionExample, Split};
use crate::training::{distillation_gap, evaluate, train, Condition, SplitMetrics, TrainConfig, TrainedModel};
use crate::{util, Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Analytic caching benchmark settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub preset: String,
    /// Prompt length of the costed request.
    pub prompt_len: usize,
    /// Fresh tokens processed after the (cached or re-encoded) prompt.
    pub input_len: usize,
    pub accounting: Accounting,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { preset: "llama7b-gated".into(), prompt_len: 26, input_len: 1, accounting: Accounting::SinglePass }
    }
}

/// Effective experiment configuration. Stage seeds are derived from `seed`
/// and the stage name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    /// Shared training settings; condition and seed are set per stage.
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl PipelineConfig {
    pub fn new(seed: u64, corpus: CorpusSpec, train: TrainConfig) -> Self {
        PipelineConfig { seed, corpus, train, bench: BenchConfig::default() }
    }

    fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec { seed: derive_seed(self.seed, "data"), ..self.corpus.clone() }
    }

    /// Training config for one condition; all conditions share the seed so
    /// they start from the same initialization.
    pub fn train_config(&self, condition: Condition) -> TrainConfig {
        TrainConfig { condition, seed: derive_seed(self.seed, "train"), ..self.train.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_digest: String,
    /// Effective stage configuration.
    pub config: serde_json::Value,
    /// Output path (relative to the run directory) to SHA-256 hex digest.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl ExperimentManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&util::read_to_string(&path)?)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        util::write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.get(name)
    }
}

pub const STAGE_DATA: &str = "data";
pub const STAGE_EVAL: &str = "eval";
pub const STAGE_BENCH: &str = "bench";

pub fn train_stage(condition: Condition) -> String {
    format!("train-{}", condition.name())
}

/// Every stage name in execution order.
pub fn stage_names() -> Vec<String> {
    let mut out = vec![STAGE_DATA.to_string()];
    out.extend(Condition::ALL.iter().map(|&c| train_stage(c)));
    out.extend([STAGE_EVAL.to_string(), STAGE_BENCH.to_string()]);
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineRun {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
}

fn digest_json(parts: &[serde_json::Value]) -> Result<String> {
    let mut s = String::new();
    for p in parts {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    Ok(util::sha256_hex(s.as_bytes()))
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: ExperimentManifest,
    run: PipelineRun,
}

impl Runner<'_> {
    /// Runs `body` unless the stage is already complete for `input_digest`.
    /// `body` returns the relative paths it produced.
    fn stage(
        &mut self,
        name: &str,
        input_digest: String,
        config: serde_json::Value,
        body: impl FnOnce(&Path) -> Result<Vec<String>>,
    ) -> Result<()> {
        if let Some(rec) = self.manifest.stages.get(name) {
            if rec.input_digest == input_digest {
                for (rel, want) in &rec.outputs {
                    let path = self.dir.join(rel);
                    if !path.exists() {
                        return Err(Error::Stage { stage: name.into(), detail: format!("output {rel} is missing") });
                    }
                    if util::file_digest(&path)? != *want {
                        return Err(Error::Stage {
                            stage: name.into(),
                            detail: format!("output {rel} no longer matches its recorded digest"),
                        });
                    }
                }
                self.run.skipped.push(name.into());
                return Ok(());
            }
        }
        let produced = body(self.dir)?;
        let mut outputs = BTreeMap::new();
        for rel in produced {
            let d = util::file_digest(&self.dir.join(&rel))?;
            outputs.insert(rel, d);
        }
        self.manifest.stages.insert(name.into(), StageRecord { input_digest, config, outputs });
        self.manifest.save(self.dir)?;
        self.run.ran.push(name.into());
        Ok(())
    }

    fn output_digest(&self, stage: &str, rel: &str) -> Result<String> {
        self.manifest
            .stages
            .get(stage)
            .and_then(|r| r.outputs.get(rel))
            .cloned()
            .ok_or_else(|| Error::Stage { stage: stage.into(), detail: format!("no recorded output {rel}") })
    }
}

const CORPUS_FILE: &str = "corpus.jsonl";
const METRICS_FILE: &str = "metrics.json";
const JUDGMENTS_FILE: &str = "judgments.jsonl";
const BENCH_FILE: &str = "bench.json";

fn ckpt_rel(c: Condition) -> String {
    format!("{}/model.ckpt", train_stage(c))
}

fn train_metrics_rel(c: Condition) -> String {
    format!("{}/metrics.json", train_stage(c))
}

/// Metrics of the eval stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub splits: BTreeMap<Condition, BTreeMap<Split, SplitMetrics>>,
    /// Oracle-judge win rate of each condition against the positive control.
    pub win_rate_vs_positive: BTreeMap<Condition, BTreeMap<Split, WinRateReport>>,
    pub exact_match_vs_positive: BTreeMap<Condition, BTreeMap<Split, f64>>,
    /// Gist model against the positive control.
    pub distillation_gap: BTreeMap<Split, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub preset: String,
    pub k: usize,
    pub caching: CachingComparison,
    /// Storage ratio over the corpus's evaluation prompts, in tokens.
    pub storage: StorageComparison,
}

/// Executes all stages in order, skipping completed ones.
pub fn run_pipeline(dir: &Path, config: &PipelineConfig) -> Result<PipelineRun> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = match ExperimentManifest::load(dir)? {
        Some(mut m) => {
            m.config = config.clone();
            m.tool_version = TOOL_VERSION.into();
            m
        }
        None => ExperimentManifest { tool_version: TOOL_VERSION.into(), config: config.clone(), stages: BTreeMap::new() },
    };
    manifest.save(dir)?;
    let mut r = Runner { dir, manifest, run: PipelineRun::default() };

    let spec = config.corpus_spec();
    r.stage(STAGE_DATA, digest_json(&[serde_json::to_value(&spec)?])?, serde_json::to_value(&spec)?, |dir| {
        generate_corpus(&spec)?.write_jsonl(&dir.join(CORPUS_FILE))?;
        Ok(vec![CORPUS_FILE.into()])
    })?;
    let corpus_digest = r.output_digest(STAGE_DATA, CORPUS_FILE)?;
    let corpus = Corpus::read_jsonl(&dir.join(CORPUS_FILE))?;

    for c in Condition::ALL {
        let cfg = config.train_config(c);
        let name = train_stage(c);
        r.stage(&name, digest_json(&[corpus_digest.clone().into(), serde_json::to_value(&cfg)?])?, serde_json::to_value(&cfg)?, |dir| {
            let out = dir.join(&name);
            let (_, report) = train(&cfg, &corpus, Some(&out))?;
            // Wall time is excluded so the file is reproducible.
            let metrics = serde_json::json!({ "loss_curve": report.loss_curve, "metrics": report.metrics });
            util::write_atomic(&out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
            Ok(vec![ckpt_rel(c), train_metrics_rel(c)])
        })?;
    }

    let mut eval_inputs = vec![corpus_digest.clone()];
    for c in Condition::ALL {
        eval_inputs.push(r.output_digest(&train_stage(c), &ckpt_rel(c))?);
    }
    let eval_seed = derive_seed(config.seed, "eval");
    eval_inputs.push(eval_seed.to_string());
    r.stage(STAGE_EVAL, digest_json(&[serde_json::to_value(&eval_inputs)?])?, serde_json::json!({ "seed": eval_seed }), |dir| {
        let models = Condition::ALL
            .iter()
            .map(|&c| {
                let (cfg, params) = load_checkpoint(&dir.join(ckpt_rel(c)))?;
                let k = config.train_config(c).k;
                Ok((c, TrainedModel { cfg, params, condition: c, k }))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let (metrics, judgments) = evaluate_conditions(&models, &corpus, eval_seed)?;
        util::write_atomic(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
        write_judgments(&dir.join(JUDGMENTS_FILE), &judgments)?;
        Ok(vec![METRICS_FILE.into(), JUDGMENTS_FILE.into()])
    })?;

    let bench = config.bench.clone();
    let k = config.train.k;
    r.stage(STAGE_BENCH, digest_json(&[corpus_digest.clone().into(), serde_json::to_value(&bench)?, k.into()])?, serde_json::to_value(&bench)?, |dir| {
        let report = bench_report(&bench, k, &corpus)?;
        util::write_atomic(&dir.join(BENCH_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
        Ok(vec![BENCH_FILE.into()])
    })?;
    Ok(r.run)
}

pub fn bench_report(bench: &BenchConfig, k: usize, corpus: &Corpus) -> Result<BenchReport> {
    let cfg = flops::presets::by_name(&bench.preset)
        .ok_or_else(|| Error::Config(format!("unknown FLOPs preset {:?}", bench.preset)))?;
    if bench.input_len == 0 || bench.prompt_len == 0 {
        return Err(Error::Config("bench prompt_len and input_len must be at least 1".into()));
    }
    let lens: Vec<usize> = Split::EVAL
        .iter()
        .flat_map(|&s| corpus.split(s))
        .map(|e| e.task.split_whitespace().count())
        .collect();
    Ok(BenchReport {
        preset: bench.preset.clone(),
        k,
        caching: caching_comparison(&cfg, bench.prompt_len, k, bench.input_len, bench.accounting),
        storage: compare_storage(&lens, k)?,
    })
}

/// Accuracy/ROUGE per condition and split, oracle win rates and exact
/// match against the positive control, and the gist distillation gap.
pub fn evaluate_conditions(
    models: &BTreeMap<Condition, TrainedModel>,
    corpus: &Corpus,
    seed: u64,
) -> Result<(EvalMetrics, Vec<crate::evaluation::Judgment>)> {
    let keywords = corpus.tfidf_compress()?;
    let mut splits = BTreeMap::new();
    let mut outputs: BTreeMap<(Condition, Split), Vec<String>> = BTreeMap::new();
    for (&c, m) in models {
        let layout = m.layout(&corpus.tokenizer, Some(&keywords));
        let mut per = BTreeMap::new();
        for split in Split::EVAL {
            let xs: Vec<&InstructionExample> = corpus.split(split).collect();
            let (metrics, outs) = evaluate(m, &layout, &xs)?;
            per.insert(split, metrics);
            outputs.insert((c, split), outs);
        }
        splits.insert(c, per);
    }
    let mut win = BTreeMap::new();
    let mut exact = BTreeMap::new();
    let mut judgments = Vec::new();
    if models.contains_key(&Condition::Positive) {
        for &c in models.keys().filter(|&&c| c != Condition::Positive) {
            let (mut w, mut e) = (BTreeMap::new(), BTreeMap::new());
            for split in Split::EVAL {
                let xs: Vec<&InstructionExample> = corpus.split(split).collect();
                let ids: Vec<String> = (0..xs.len()).map(|i| format!("{c}/{split}/{i}")).collect();
                let gold: Vec<String> = xs.iter().map(|e| e.output.clone()).collect();
                let a = &outputs[&(c, split)];
                let b = &outputs[&(Condition::Positive, split)];
                let js = judge_all(&ids, &gold, a, b, derive_seed(seed, &format!("{c}/{split}")))?;
                w.insert(split, win_rate(&js)?);
                e.insert(split, exact_match_rate(a, b)?);
                judgments.extend(js);
            }
            win.insert(c, w);
            exact.insert(c, e);
        }
    }
    let mut gap = BTreeMap::new();
    if let (Some(pos), Some(gist)) = (models.get(&Condition::Positive), models.get(&Condition::Gist)) {
        for split in Split::EVAL {
            let xs: Vec<&InstructionExample> = corpus.split(split).collect();
            gap.insert(split, distillation_gap(pos, gist, &corpus.tokenizer, &xs)?);
        }
    }
    Ok((EvalMetrics { splits, win_rate_vs_positive: win, exact_match_vs_positive: exact, distillation_gap: gap }, judgments))
}

/// Rendered report plus its machine-readable twin.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: serde_json::Value,
    /// False when a stage was missing; its cells read "stage missing".
    pub complete: bool,
}

const MISSING: &str = "stage missing";

fn load_stage_json<T: for<'de> Deserialize<'de>>(
    dir: &Path,
    manifest: &ExperimentManifest,
    stage: &str,
    rel: &str,
) -> Result<Option<T>> {
    let Some(rec) = manifest.stage(stage) else { return Ok(None) };
    let path: PathBuf = dir.join(rel);
    match rec.outputs.get(rel) {
        Some(want) if path.exists() => {
            if util::file_digest(&path)? != *want {
                return Err(Error::Stage { stage: stage.into(), detail: format!("{rel} does not match its digest") });
            }
            Ok(Some(serde_json::from_str(&util::read_to_string(&path)?)?))
        }
        _ => Ok(None),
    }
}

/// Quality table per condition and split, plus the caching FLOPs table (toy-scale
/// models, analytic full-scale FLOPs).
pub fn report(dir: &Path) -> Result<Report> {
    let manifest = ExperimentManifest::load(dir)?
        .ok_or_else(|| Error::Stage { stage: "manifest".into(), detail: format!("no {MANIFEST_FILE} in {}", dir.display()) })?;
    let eval: Option<EvalMetrics> = load_stage_json(dir, &manifest, STAGE_EVAL, METRICS_FILE)?;
    let bench: Option<BenchReport> = load_stage_json(dir, &manifest, STAGE_BENCH, BENCH_FILE)?;
    let mut complete = stage_names().iter().all(|s| manifest.stage(s).is_some()) && eval.is_some() && bench.is_some();
    let rows = [
        (Condition::Positive, "Pos"),
        (Condition::Gist, "Gist"),
        (Condition::Tfidf, "TF-IDF"),
        (Condition::Negative, "Neg"),
    ];
    let mut text = String::new();
    let _ = writeln!(text, "Quality (toy-scale models; oracle judge vs. Pos)");
    let _ = writeln!(
        text,
        "{:<8} {:>32} {:>32} {:>32}",
        "", "seen", "unseen", "ood"
    );
    let _ = writeln!(
        text,
        "{:<8} {}",
        "",
        ["seen", "unseen", "ood"].map(|_| format!("{:>10} {:>10} {:>10}", "rougeL", "win%", "acc")).join(" ")
    );
    let mut rows_json = serde_json::Map::new();
    for (c, label) in rows {
        let mut line = format!("{label:<8}");
        let mut cells = serde_json::Map::new();
        for split in Split::EVAL {
            let m = eval.as_ref().and_then(|e| e.splits.get(&c)).and_then(|s| s.get(&split));
            match m {
                Some(m) => {
                    let wr = if c == Condition::Positive {
                        Some(50.0)
                    } else {
                        eval.as_ref()
                            .and_then(|e| e.win_rate_vs_positive.get(&c))
                            .and_then(|w| w.get(&split))
                            .map(|w| 100.0 * w.win_rate_with_ties_split)
                    };
                    let neg = eval.as_ref().and_then(|e| e.splits.get(&Condition::Negative)).and_then(|s| s.get(&split));
                    let pos = eval.as_ref().and_then(|e| e.splits.get(&Condition::Positive)).and_then(|s| s.get(&split));
                    let norm = match (neg, pos) {
                        (Some(n), Some(p)) => normalize(m.rouge_l, n.rouge_l, p.rouge_l),
                        _ => None,
                    };
                    let _ = write!(
                        line,
                        " {:>10.3} {:>10} {:>10.3}",
                        m.rouge_l,
                        wr.map_or("-".to_string(), |w| format!("{w:.1}")),
                        m.accuracy
                    );
                    cells.insert(
                        split.name().into(),
                        serde_json::json!({
                            "rouge_l": m.rouge_l,
                            "rouge_l_normalized": norm,
                            "win_rate_percent": wr,
                            "accuracy": m.accuracy,
                        }),
                    );
                }
                None => {
                    complete = false;
                    let _ = write!(line, " {:>32}", MISSING);
                    cells.insert(split.name().into(), serde_json::Value::String(MISSING.into()));
                }
            }
        }
        let _ = writeln!(text, "{line}");
        rows_json.insert(label.into(), serde_json::Value::Object(cells));
    }
    if let Some(e) = &eval {
        let _ = writeln!(text, "\nExact match vs. Pos and distillation gap (Gist)");
        for split in Split::EVAL {
            let em = e.exact_match_vs_positive.get(&Condition::Gist).and_then(|m| m.get(&split));
            let gap = e.distillation_gap.get(&split);
            let _ = writeln!(
                text,
                "{:<8} exact {:>8} gap {:>10}",
                split.name(),
                em.map_or("-".into(), |v| format!("{v:.3}")),
                gap.map_or("-".into(), |v| format!("{v:.5}"))
            );
        }
    }

    let _ = writeln!(text, "\nEfficiency (analytic FLOPs at full scale)");
    let bench_json = match &bench {
        Some(b) => {
            let g = |v: u64| v as f64 / 1e9;
            let c = &b.caching;
            let _ = writeln!(text, "preset {} prompt {} tokens, k = {}", b.preset, c.prompt_len, b.k);
            let _ = writeln!(text, "{:<12} {:>14} {:>14} {:>14}", "", "None", "Instruction", "Gist");
            let _ = writeln!(text, "{:<12} {:>14.2} {:>14.2} {:>14.2}", "GFLOPs", g(c.none), g(c.instruction), g(c.gist));
            let _ = writeln!(
                text,
                "{:<12} {:>14.2} {:>14.4} {:>14}",
                "Gist saves",
                c.gist_vs_none() as f64 / 1e9,
                c.gist_vs_instruction() as f64 / 1e9,
                "-"
            );
            let _ = writeln!(
                text,
                "{:<12} {:>13.2}% {:>13.4}% {:>14}",
                "relative",
                100.0 * c.relative_vs_none(),
                100.0 * c.relative_vs_instruction(),
                "-"
            );
            let _ = writeln!(
                text,
                "storage: instruction/gist = {:.1}x (mean prompt {:.2} tokens), {:.1}x at max",
                b.storage.ratio_by_mean, b.storage.mean_prompt_len, b.storage.ratio_by_max
            );
            serde_json::to_value(b)?
        }
        None => {
            complete = false;
            let _ = writeln!(text, "{MISSING}");
            serde_json::Value::String(MISSING.into())
        }
    };
    let json = serde_json::json!({
        "tool_version": manifest.tool_version,
        "quality": rows_json,
        "eval": eval,
        "efficiency": bench_json,
        "complete": complete,
    });
    Ok(Report { text, json, complete })
}

/// Writes `report.txt` and `report.json` into the run directory.
pub fn write_report(dir: &Path) -> Result<Report> {
    let r = report(dir)?;
    util::write_atomic(&dir.join("report.txt"), r.text.as_bytes())?;
    util::write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&r.json)?.as_bytes())?;
    Ok(r)
}
