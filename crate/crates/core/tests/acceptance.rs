//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 4 7`.
//!
//! Criteria 5, 6 and 8 train models. Their pipeline directory lives under
//! the cargo target tmpdir and is reused across runs when every stage digest
//! still matches; set `GISTKIT_ACCEPTANCE_FRESH=1` to retrain from scratch.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use gistkit::cache::{compare_storage, compress_prompt, storage_report};
use gistkit::evaluation::{clopper_pearson, lcs_len, rouge_l};
use gistkit::flops::{caching_comparison, forward_flops, presets, Accounting};
use gistkit::masking::{brute_force_gist_mask, make_gist_mask, MaskMode};
use gistkit::model::{generate, load_checkpoint, trace, ModelConfig, Params, Prefix};
use gistkit::numeric::rng::rng;
use gistkit::numeric::{grad_check_many, Graph};
use gistkit::pipeline::{run_pipeline, EvalMetrics, PipelineConfig};
use gistkit::taskgen::tfidf::TfIdf;
use gistkit::taskgen::{Corpus, CorpusSpec, InstructionExample, Split};
use gistkit::training::{
    distillation_gap, sweep_row, train, Condition, SweepRow, TrainConfig, TrainReport, TrainedModel, SWEEP_KS,
};
use gistkit::util::sha256_hex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_mask_exhaustive() -> Outcome {
    let t = Instant::now();
    let mut n = 0;
    for len in 1..=8 {
        for ids in all_sequences(len, 7) {
            let batch = [ids.as_slice()];
            if make_gist_mask(&batch, GIST, PAD) != brute_force_gist_mask(&batch, GIST, PAD) {
                return Err(format!("mismatch on {ids:?}"));
            }
            n += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(n == 9840 && secs < 5.0, format!("{n} sequences (6561 of length 8) identical, {secs:.2}s"))
}

fn c2_cache_correctness() -> Outcome {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let layers = r.random_range(1..=3);
        let d = [8, 16][r.random_range(0..2)];
        let cfg = ModelConfig::tiny(layers, d, 2);
        let p = Params::init_with_scale(&cfg, &mut rng(1000 + trial), 0.5).map_err(|e| e.to_string())?;
        let (np, ns, k) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=3));
        let prompt = random_ids(&mut r, np, cfg.vocab_size);
        let suffix = random_ids(&mut r, ns, cfg.vocab_size);
        worst = worst.max(cache_gap(&cfg, &p, &prompt, k, &suffix));
        let prefix = compress_prompt(&cfg, &p, &prompt, k).map_err(|e| e.to_string())?;
        let max_new = cfg.max_seq_len - (np + k + ns);
        let cached = generate(&cfg, &p, Prefix::Cached { cache: &prefix, suffix: &suffix }, max_new, None);
        let full_ids = gist_sequence(&prompt, k, &suffix);
        let full = generate(&cfg, &p, Prefix::Tokens { ids: &full_ids, mode: MaskMode::Gist }, max_new, None);
        let (cached, full) = (cached.map_err(|e| e.to_string())?, full.map_err(|e| e.to_string())?);
        if cached != full {
            return Err(format!("trial {trial}: greedy continuations differ: {cached:?} vs {full:?}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-9 && secs < 60.0,
        format!("100 triples, max |logit gap| {worst:.2e}, continuations identical, {secs:.1}s"),
    )
}

fn c3_grad_check() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::tiny(2, 16, 2);
    let mut errs = Vec::new();
    for seed in 0..5u64 {
        let params = Params::init_with_scale(&cfg, &mut rng(seed), 0.3).map_err(|e| e.to_string())?;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<Vec<u32>> = (0..2)
            .map(|_| {
                let np = r.random_range(1..4);
                let mut s = gist_sequence(&random_ids(&mut r, np, cfg.vocab_size), 1, &random_ids(&mut r, 4, cfg.vocab_size));
                s.resize(8, PAD);
                s
            })
            .collect();
        let mask = gistkit::masking::decoder_mask(&batch, GIST, PAD, MaskMode::Gist).into_vec();
        let targets: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().map(|&t| t as usize).chain([0])).collect();
        let keep: Vec<bool> =
            batch.iter().flat_map(|s| (0..s.len()).map(move |i| i + 1 < s.len() && s[i + 1] != PAD)).collect();
        let err = grad_check_many(
            |g: &mut Graph, ids| {
                let tr = trace(g, &cfg, ids, &batch, mask.clone(), None)?;
                g.cross_entropy(tr.logits, &targets, &keep)
            },
            params.tensors(),
            1e-5,
            None,
        )
        .map_err(|e| e.to_string())?;
        errs.push(err);
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 120.0,
        format!("2 layers, d_model 16, 5 seeds, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn c4_flops() -> Outcome {
    let llama = presets::llama7b();
    let r = forward_flops(&llama, 1, 2000);
    let a = 100.0 * r.kv_dependent_fraction;
    let b = r.total as f64 / forward_flops(&llama, 1, 0).total as f64;
    let gated = caching_comparison(&presets::llama7b_gated(), 26, 1, 1, Accounting::SinglePass);
    let c = gated.gist_vs_none() as f64 / 1e9;
    let plain = caching_comparison(&llama, 26, 1, 1, Accounting::SinglePass);
    let d = 100.0 * plain.relative_vs_instruction();
    let bytes = storage_report(&llama, 1, 4, 0).bytes_per_token;
    let ratio = compare_storage(&[26], 1).map_err(|e| e.to_string())?.ratio_by_mean;
    let parts = [
        ((a - 9.6).abs() <= 0.5, format!("a {a:.2}%")),
        ((b - 1.10).abs() <= 0.02, format!("b {b:.4}")),
        ((c - 362.0).abs() <= 36.2, format!("c {c:.1} GFLOPs (llama7b-gated)")),
        ((0.05..=0.30).contains(&d), format!("d {d:.4}% (prompt 26 -> k 1, one input token)")),
        (bytes == 1_048_576 && ratio == 26.0, format!("e {bytes} B/token, {ratio}x")),
    ];
    let ok = parts.iter().all(|(p, _)| *p);
    let detail = parts.iter().map(|(p, s)| if *p { s.clone() } else { format!("{s} OUT OF BAND") }).collect::<Vec<_>>();
    check(ok, detail.join("; "))
}

fn c7_metric_oracles() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let (n, m) = (r.random_range(0..=20), r.random_range(1..=20));
        let cand: Vec<u8> = (0..n).map(|_| r.random_range(0..5)).collect();
        let reference: Vec<u8> = (0..m).map(|_| r.random_range(0..5)).collect();
        let got = rouge_l(&cand, &reference).map_err(|e| e.to_string())?;
        if lcs_len(&cand, &reference) != lcs_table(&cand, &reference) || (got - rouge_l_oracle(&cand, &reference)).abs() > 1e-15 {
            return Err(format!("rouge-l pair {i} differs from the LCS oracle"));
        }
    }
    let mut worst_ci: f64 = 0.0;
    for (x, n, lo, hi) in BETA_QUANTILES {
        let (a, b) = clopper_pearson(x, n, 0.05);
        worst_ci = worst_ci.max((a - lo).abs()).max((b - hi).abs());
    }
    let (lo0, hi0) = clopper_pearson(0, 10, 0.05);
    if worst_ci >= 1e-6 || lo0 != 0.0 || (hi0 - 0.3085).abs() >= 5e-5 {
        return Err(format!("clopper-pearson off by {worst_ci:.2e}; (0,10) -> [{lo0}, {hi0:.4}]"));
    }
    let mut checked = 0;
    for _ in 0..10 {
        let corpus: Vec<String> = (0..100)
            .map(|_| {
                let n = r.random_range(1..8);
                (0..n).map(|_| TFIDF_WORDS[r.random_range(0..TFIDF_WORDS.len())]).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let model = TfIdf::fit(corpus.iter().map(String::as_str));
        for doc in &corpus {
            let kw = model.keyword(doc).map_err(|e| e.to_string())?;
            if kw.term != brute_force_keyword(&corpus, doc).0 {
                return Err(format!("tf-idf keyword for {doc:?} differs from brute force"));
            }
            checked += 1;
        }
    }
    let injected: Vec<&str> = BACKGROUND.iter().copied().chain([SALARY, AVERAGE]).collect();
    let model = TfIdf::fit(injected);
    let (s, a) = (model.keyword(SALARY).map_err(|e| e.to_string())?, model.keyword(AVERAGE).map_err(|e| e.to_string())?);
    check(
        s.word == "salary" && a.word == "average",
        format!(
            "1000 rouge-l pairs exact; CI max error {worst_ci:.1e}, (0,10) -> [0, {hi0:.4}]; {checked} tf-idf keywords exact; \
             injected examples -> {:?}, {:?}",
            s.word, a.word
        ),
    )
}

/// Outputs of the default-configuration pipeline run shared by 5, 6 and 8.
struct Replication {
    dir: PathBuf,
    corpus: Corpus,
    config: PipelineConfig,
    eval: EvalMetrics,
    train_secs: BTreeMap<Condition, f64>,
    eval_secs: Option<f64>,
    reused: Vec<String>,
}

fn acceptance_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn fresh() -> bool {
    std::env::var("GISTKIT_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn replicate() -> Result<Replication, String> {
    let dir = acceptance_dir().join("pipeline");
    if fresh() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    let config = PipelineConfig::new(0, CorpusSpec::default(), TrainConfig::desk(Condition::Gist, 1));
    let t = Instant::now();
    let run = run_pipeline(&dir, &config).map_err(|e| e.to_string())?;
    let total = t.elapsed().as_secs_f64();
    let corpus = Corpus::read_jsonl(&dir.join("corpus.jsonl")).map_err(|e| e.to_string())?;
    let eval: EvalMetrics = read_json(&dir.join("metrics.json"))?;
    let mut train_secs = BTreeMap::new();
    for c in Condition::ALL {
        let rep: TrainReport = read_json(&dir.join(format!("train-{}", c.name())).join("report.json"))?;
        train_secs.insert(c, rep.wall_time_secs);
    }
    let eval_secs = run.ran.iter().any(|s| s == "eval").then(|| {
        let trained: f64 =
            Condition::ALL.iter().filter(|c| run.ran.contains(&format!("train-{}", c.name()))).map(|c| train_secs[c]).sum();
        (total - trained).max(0.0)
    });
    Ok(Replication { dir, corpus, config, eval, train_secs, eval_secs, reused: run.skipped })
}

fn replication() -> Result<&'static Replication, String> {
    static CELL: OnceLock<Result<Replication, String>> = OnceLock::new();
    CELL.get_or_init(replicate).as_ref().map_err(Clone::clone)
}

fn acc(m: &EvalMetrics, c: Condition, s: Split) -> f64 {
    m.splits[&c][&s].accuracy
}

fn reuse_note(rep: &Replication) -> String {
    if rep.reused.is_empty() {
        String::new()
    } else {
        format!(" [reused {} stage(s) from {}]", rep.reused.len(), rep.dir.display())
    }
}

// Thresholds fixed after a pilot of the desk preset (seed 0, default corpus).
// Pilot exact-match accuracy, seen / unseen / ood:
//   positive 0.843 / 0.556 / 0.052
//   gist     0.780 / 0.289 / 0.067
//   negative 0.000 / 0.022 / 0.015
//   tfidf    0.083 / 0.044 / 0.007
// The current run's values are printed after the criteria.
const UNSEEN_MARGIN_OVER_NEG: f64 = 0.20;
const SEEN_FRACTION_OF_POS: f64 = 0.8;

fn c5_replication() -> Outcome {
    let rep = replication()?;
    let m = &rep.eval;
    let (g_un, n_un, t_un) = (
        acc(m, Condition::Gist, Split::Unseen),
        acc(m, Condition::Negative, Split::Unseen),
        acc(m, Condition::Tfidf, Split::Unseen),
    );
    let (g_seen, p_seen) = (acc(m, Condition::Gist, Split::Seen), acc(m, Condition::Positive, Split::Seen));
    let em = &m.exact_match_vs_positive[&Condition::Gist];
    let (em_seen, em_ood) = (em[&Split::Seen], em[&Split::Ood]);
    let train_total: f64 = rep.train_secs.values().sum();
    let runtime = train_total + rep.eval_secs.unwrap_or(0.0);
    let parts = [
        (g_un >= n_un + UNSEEN_MARGIN_OVER_NEG, format!("(i) gist unseen {g_un:.3} vs neg {n_un:.3}")),
        (g_seen >= SEEN_FRACTION_OF_POS * p_seen, format!("(ii) gist seen {g_seen:.3} vs pos {p_seen:.3}")),
        (t_un <= g_un, format!("(iii) tfidf unseen {t_un:.3} <= gist {g_un:.3}")),
        (em_seen > em_ood, format!("(iv) exact match vs pos seen {em_seen:.3} > ood {em_ood:.3}")),
        (runtime <= 1800.0, format!("runtime {runtime:.0}s (training {train_total:.0}s)")),
    ];
    let ok = parts.iter().all(|(p, _)| *p);
    let detail: Vec<String> = parts.iter().map(|(p, s)| if *p { s.clone() } else { format!("{s} FAILED") }).collect();
    check(ok, format!("{}{}", detail.join("; "), reuse_note(rep)))
}

fn sweep_run(rep: &Replication, k: usize) -> Result<(SweepRow, f64), String> {
    let cfg = TrainConfig { k, ..rep.config.train_config(Condition::Gist) };
    let report: TrainReport = if k == rep.config.train.k {
        read_json(&rep.dir.join("train-gist/report.json"))?
    } else {
        let dir = acceptance_dir().join(format!("sweep-k{k}"));
        let stamp = dir.join("inputs.sha256");
        let inputs = sha256_hex(
            format!("{}\n{}", rep.corpus.digest().map_err(|e| e.to_string())?, serde_json::to_string(&cfg).unwrap())
                .as_bytes(),
        );
        let cached = !fresh() && std::fs::read_to_string(&stamp).is_ok_and(|s| s == inputs);
        match cached.then(|| read_json::<TrainReport>(&dir.join("report.json"))) {
            Some(Ok(r)) => r,
            _ => {
                let _ = std::fs::remove_dir_all(&dir);
                let (_, r) = train(&cfg, &rep.corpus, Some(&dir)).map_err(|e| format!("k={k}: {e}"))?;
                std::fs::write(&stamp, inputs).map_err(|e| e.to_string())?;
                r
            }
        }
    };
    let row = sweep_row(&rep.corpus, &report).map_err(|e| e.to_string())?;
    Ok((row, report.wall_time_secs))
}

fn c6_k_sweep() -> Outcome {
    let rep = replication()?;
    let mut rows = Vec::new();
    let mut secs = 0.0;
    for k in SWEEP_KS {
        let (row, s) = sweep_run(rep, k)?;
        secs += s;
        rows.push(row);
    }
    let seen: Vec<(usize, f64)> = rows.iter().map(|r| (r.k, r.metrics[&Split::Seen].accuracy)).collect();
    let finite = rows.iter().all(|r| r.final_loss.is_finite());
    let best = seen.iter().map(|&(_, a)| a).fold(f64::MIN, f64::max);
    let k1 = seen[0].1;
    let table = seen.iter().map(|(k, a)| format!("k={k} {a:.3}")).collect::<Vec<_>>().join(", ");
    check(
        finite && best - k1 <= 0.05 && secs <= 3600.0,
        format!("seen accuracy {table}; k=1 is {:.1} points below best; no divergence; training {secs:.0}s", 100.0 * (best - k1)),
    )
}

fn c8_distillation_gap() -> Outcome {
    let rep = replication()?;
    let (cfg, params) = load_checkpoint(&rep.dir.join("train-positive/model.ckpt")).map_err(|e| e.to_string())?;
    let pos = TrainedModel { cfg, params, condition: Condition::Positive, k: 1 };
    let seen: Vec<&InstructionExample> = rep.corpus.split(Split::Seen).take(50).collect();
    let own = distillation_gap(&pos, &pos, &rep.corpus.tokenizer, &seen).map_err(|e| e.to_string())?;
    let gap = &rep.eval.distillation_gap;
    let (s, o) = (gap[&Split::Seen], gap[&Split::Ood]);
    check(own == 0.0 && s < o, format!("self-comparison {own}; gist vs pos gap seen {s:.4} < ood {o:.4}"))
}

fn pilot_numbers() -> Outcome {
    let rep = replication()?;
    let mut lines = Vec::new();
    for c in Condition::ALL {
        let row: Vec<String> =
            Split::EVAL.iter().map(|&s| format!("{} {:.3}", s.name(), acc(&rep.eval, c, s))).collect();
        lines.push(format!("{} [{}]", c.name(), row.join(", ")));
    }
    Ok(lines.join("; "))
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    ("1", "mask oracle exhaustiveness", c1_mask_exhaustive),
    ("2", "gist cache correctness", c2_cache_correctness),
    ("3", "gradient integrity", c3_grad_check),
    ("4", "FLOPs and storage", c4_flops),
    ("5", "desk-scale gisting replication", c5_replication),
    ("6", "k sweep", c6_k_sweep),
    ("7", "metric oracles", c7_metric_oracles),
    ("8", "distillation gap", c8_distillation_gap),
];

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran_training = false;
    for (id, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        ran_training |= matches!(id, "5" | "6" | "8");
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("[PASS] {id}. {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {id}. {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if ran_training {
        match pilot_numbers() {
            Ok(s) => println!("accuracy by condition: {s}"),
            Err(e) => println!("accuracy by condition unavailable: {e}"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
