use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gistkit::cache::CacheStore;
use gistkit::evaluation::{
    exact_match_rate, judge_all, read_judgments, win_rate, write_judgments, Judgment, WinRateReport,
};
use gistkit::flops::{self, caching_comparison, forward_flops, Accounting};
use gistkit::model::{load_checkpoint, model_digest, ModelConfig};
use gistkit::pipeline::{self, PipelineConfig};
use gistkit::taskgen::{generate_corpus, Corpus, CorpusSpec, InstructionExample, Split};
use gistkit::training::{
    distillation_gap, evaluate, predict_cached, train, Condition, TrainConfig, TrainReport, TrainedModel,
};

#[derive(Parser)]
#[command(name = "gistkit", version, about = "Prompt compression with gist tokens")]
struct Cli {
    /// Root for caches, checkpoints and pipeline runs.
    #[arg(long, env = "GISTKIT_HOME", default_value = ".gistkit", global = true)]
    home: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or inspect instruction corpora.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train one condition.
    Train(TrainArgs),
    /// Compare two trained models.
    Eval(EvalArgs),
    /// Inspect the prompt cache store.
    #[command(subcommand)]
    Cache(CacheCmd),
    /// Analytic FLOPs of a forward pass or of caching strategies.
    Flops(FlopsArgs),
    /// Run or report the full experiment.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Alpaca,
}

fn load_corpus(path: &Path, format: Format) -> Result<Corpus> {
    let c = match format {
        Format::Jsonl => Corpus::read_jsonl(path),
        Format::Alpaca => Corpus::read_alpaca(path),
    };
    c.with_context(|| format!("reading corpus {}", path.display()))
}

#[derive(Subcommand)]
enum DataCmd {
    /// Write a synthetic corpus as JSONL.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = CorpusSpec::default().num_tasks)]
        tasks: usize,
        #[arg(long, default_value_t = CorpusSpec::default().num_examples)]
        examples: usize,
        #[arg(long, default_value_t = CorpusSpec::default().empty_input_fraction)]
        empty_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary statistics of a corpus file.
    Stats {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffw: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Calibrated desk-scale preset used for the replication runs.
    Desk,
    /// Generic toy preset (2000 steps, lr 3e-4).
    Toy,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

impl TrainOverrides {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup_fraction = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        let m = &self.model;
        let mut model: ModelConfig = cfg.model;
        if let Some(v) = m.layers {
            model.num_layers = v;
        }
        if let Some(v) = m.d_model {
            model.d_model = v;
        }
        if let Some(v) = m.heads {
            model.num_heads = v;
        }
        if m.d_model.is_some() || m.heads.is_some() {
            model.key_size = model.d_model / model.num_heads.max(1);
        }
        if let Some(v) = m.ffw {
            model.ffw_size = v;
        }
        if let Some(v) = m.max_seq_len {
            model.max_seq_len = v;
        }
        cfg.model = model;
        cfg
    }

    fn base(&self, condition: Condition, k: usize) -> TrainConfig {
        match self.preset {
            Preset::Desk => TrainConfig::desk(condition, k),
            Preset::Toy => TrainConfig::toy(condition, k),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "gist")]
    condition: Condition,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    /// Output directory; defaults to $GISTKIT_HOME/runs/<condition>-k<k>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Training output directory (or its model.ckpt); give exactly two.
    #[arg(long, num_args = 1, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: Format,
    /// `oracle`, or `import:<judgments.jsonl>` for externally produced verdicts.
    #[arg(long, default_value = "oracle")]
    judge: String,
    /// Restrict to one split.
    #[arg(long)]
    split: Option<String>,
    /// Where to write the oracle's judgments.
    #[arg(long)]
    judgments_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Serve prompt prefixes from the cache store under $GISTKIT_HOME/cache.
    #[arg(long)]
    use_cache: bool,
}

#[derive(Subcommand)]
enum CacheCmd {
    /// List stored entries.
    Ls,
    /// Delete every entry.
    Purge,
    /// Entry count and total size.
    Stat,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value = "llama7b")]
    preset: String,
    #[arg(long, default_value_t = 1)]
    seq: usize,
    #[arg(long, default_value_t = 0)]
    kv: usize,
    /// Per-term share of one layer.
    #[arg(long)]
    pie: bool,
    /// `key=value` output.
    #[arg(long)]
    raw: bool,
    /// Compare none/instruction/gist caching for a prompt of this length.
    #[arg(long)]
    compare_prompt: Option<usize>,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    input_len: usize,
    /// Also cost this many decoded tokens.
    #[arg(long)]
    output_len: Option<usize>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run every stage whose inputs changed.
    Run {
        /// Run directory; defaults to $GISTKIT_HOME/pipeline.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// JSON pipeline config; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        examples: Option<usize>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Print the tables of a finished run.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Data(cmd) => data(cmd)?,
        Command::Train(args) => train_cmd(&cli.home, args)?,
        Command::Eval(args) => eval_cmd(&cli.home, args)?,
        Command::Cache(cmd) => cache_cmd(&cli.home, cmd)?,
        Command::Flops(args) => flops_cmd(args)?,
        Command::Pipeline(cmd) => return pipeline_cmd(&cli.home, cmd),
    }
    Ok(ExitCode::SUCCESS)
}

fn data(cmd: DataCmd) -> Result<()> {
    match cmd {
        DataCmd::Gen { seed, tasks, examples, empty_fraction, out } => {
            let spec = CorpusSpec {
                seed,
                num_tasks: tasks,
                num_examples: examples,
                empty_input_fraction: empty_fraction,
                ..CorpusSpec::default()
            };
            let corpus = generate_corpus(&spec)?;
            corpus.write_jsonl(&out)?;
            println!("wrote {} examples to {}", corpus.examples.len(), out.display());
            print!("{}", corpus.stats());
        }
        DataCmd::Stats { file, format } => {
            let corpus = load_corpus(&file, format)?;
            print!("{}", corpus.stats());
        }
    }
    Ok(())
}

fn train_cmd(home: &Path, args: TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus, args.format)?;
    let mut cfg = args.overrides.apply(args.overrides.base(args.condition, args.k));
    cfg.seed = args.seed;
    let out = args
        .out
        .unwrap_or_else(|| home.join("runs").join(format!("{}-k{}", args.condition, args.k)));
    let (_, report) = train(&cfg, &corpus, Some(&out))?;
    print_metrics(&report);
    println!("checkpoint {}", out.join("model.ckpt").display());
    Ok(())
}

fn print_metrics(report: &TrainReport) {
    if let Some(p) = report.loss_curve.last() {
        println!("final loss {:.4} after {} steps ({:.1}s)", p.loss, p.step + 1, report.wall_time_secs);
    }
    for (split, m) in &report.metrics {
        println!("{split:<8} accuracy {:.3}  rougeL {:.3}  (n={})", m.accuracy, m.rouge_l, m.n);
    }
}

/// Loads a checkpoint and the condition/k recorded in the sibling report.
fn load_model(path: &Path) -> Result<TrainedModel> {
    let (dir, ckpt) = if path.is_dir() {
        (path.to_path_buf(), path.join("model.ckpt"))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let report_path = dir.join("report.json");
    let report: TrainReport = serde_json::from_str(
        &std::fs::read_to_string(&report_path).with_context(|| format!("reading {}", report_path.display()))?,
    )?;
    let (cfg, params) = load_checkpoint(&ckpt)?;
    Ok(TrainedModel { cfg, params, condition: report.config.condition, k: report.config.k })
}

fn parse_split(s: &str) -> Result<Split> {
    Split::EVAL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| anyhow!("unknown split {s:?}; expected seen, unseen or ood"))
}

fn eval_cmd(home: &Path, args: EvalArgs) -> Result<()> {
    if args.ckpt.len() != 2 {
        bail!("eval needs exactly two --ckpt arguments, got {}", args.ckpt.len());
    }
    let corpus = load_corpus(&args.corpus, args.format)?;
    let a = load_model(&args.ckpt[0])?;
    let b = load_model(&args.ckpt[1])?;
    for m in [&a, &b] {
        if m.cfg.vocab_size != corpus.tokenizer.vocab_size() {
            bail!(
                "checkpoint vocabulary ({}) does not match the corpus tokenizer ({})",
                m.cfg.vocab_size,
                corpus.tokenizer.vocab_size()
            );
        }
    }
    let splits: Vec<Split> = match &args.split {
        Some(s) => vec![parse_split(s)?],
        None => Split::EVAL.to_vec(),
    };
    let imported: Option<Vec<Judgment>> = match args.judge.as_str() {
        "oracle" => None,
        s => match s.strip_prefix("import:") {
            Some(path) => Some(read_judgments(Path::new(path))?),
            None => bail!("--judge must be `oracle` or `import:<file>`"),
        },
    };
    let keywords = corpus.tfidf_compress()?;
    let store = CacheStore::new(home.join("cache"));
    let ids = [model_digest(&a.cfg, &a.params), model_digest(&b.cfg, &b.params)];
    let mut all_judgments = Vec::new();
    println!("A = {} (k={}), B = {} (k={})", a.condition, a.k, b.condition, b.k);
    for split in splits {
        let xs: Vec<&InstructionExample> = corpus.split(split).collect();
        if xs.is_empty() {
            continue;
        }
        let mut outs: Vec<Vec<String>> = Vec::new();
        for (m, id) in [&a, &b].into_iter().zip(&ids) {
            let layout = m.layout(&corpus.tokenizer, Some(&keywords));
            let o = if args.use_cache {
                xs.iter().map(|e| predict_cached(m, &layout, e, &store, id)).collect::<Result<Vec<_>, _>>()?
            } else {
                evaluate(m, &layout, &xs)?.1
            };
            let acc = o.iter().zip(&xs).filter(|(o, e)| **o == e.output).count() as f64 / xs.len() as f64;
            println!("{split:<8} {:<8} accuracy {acc:.3}", m.condition.name());
            outs.push(o);
        }
        let report: WinRateReport = match &imported {
            Some(js) => {
                let prefix = format!("{split}/");
                let sel: Vec<Judgment> = js.iter().filter(|j| j.id.starts_with(&prefix)).cloned().collect();
                if sel.is_empty() {
                    println!("{split:<8} no imported judgments");
                    continue;
                }
                win_rate(&sel)?
            }
            None => {
                let ids: Vec<String> = (0..xs.len()).map(|i| format!("{split}/{i}")).collect();
                let gold: Vec<String> = xs.iter().map(|e| e.output.clone()).collect();
                let js = judge_all(&ids, &gold, &outs[0], &outs[1], args.seed)?;
                let r = win_rate(&js)?;
                all_judgments.extend(js);
                r
            }
        };
        println!(
            "{split:<8} A win rate {:.3} [{:.3}, {:.3}]  (W {} / L {} / T {})  exact match {:.3}",
            report.win_rate_with_ties_split,
            report.ci_low,
            report.ci_high,
            report.wins,
            report.losses,
            report.ties,
            exact_match_rate(&outs[0], &outs[1])?
        );
        let pair = match (a.condition, b.condition) {
            (Condition::Positive, Condition::Gist) => Some((&a, &b)),
            (Condition::Gist, Condition::Positive) => Some((&b, &a)),
            _ => None,
        };
        if let Some((pos, gist)) = pair {
            println!("{split:<8} distillation gap {:.5}", distillation_gap(pos, gist, &corpus.tokenizer, &xs)?);
        }
    }
    if let Some(path) = args.judgments_out {
        write_judgments(&path, &all_judgments)?;
    }
    Ok(())
}

fn cache_cmd(home: &Path, cmd: CacheCmd) -> Result<()> {
    let store = CacheStore::new(home.join("cache"));
    match cmd {
        CacheCmd::Ls => {
            for e in store.list()? {
                println!(
                    "{}  {:>10} B  {:?} k={} len={}",
                    e.key, e.bytes, e.header.strategy, e.header.k, e.header.len
                );
            }
        }
        CacheCmd::Purge => println!("removed {} entries", store.purge()?),
        CacheCmd::Stat => {
            let s = store.stats()?;
            println!("root    {}", store.root().display());
            println!("entries {}", s.entries);
            println!("bytes   {}", s.total_bytes);
        }
    }
    Ok(())
}

fn flops_cmd(args: FlopsArgs) -> Result<()> {
    let cfg = flops::presets::by_name(&args.preset).ok_or_else(|| {
        anyhow!("unknown preset {:?}; choose one of {}", args.preset, flops::presets::NAMES.join(", "))
    })?;
    if let Some(prompt) = args.compare_prompt {
        let accounting = match args.output_len {
            Some(output_len) => Accounting::Generation { output_len },
            None => Accounting::SinglePass,
        };
        print!("{}", caching_comparison(&cfg, prompt, args.k, args.input_len, accounting).to_text());
        return Ok(());
    }
    if args.seq == 0 {
        bail!("--seq must be at least 1");
    }
    let report = forward_flops(&cfg, args.seq, args.kv);
    if args.raw {
        print!("{}", report.to_kv_lines());
    } else {
        print!("{}", report.to_text());
    }
    if args.pie {
        println!("share of one layer:");
        for (name, pct) in report.layer_breakdown() {
            println!("  {name:<26} {pct:>6.2}%");
        }
    }
    Ok(())
}

fn pipeline_cmd(home: &Path, cmd: PipelineCmd) -> Result<ExitCode> {
    match cmd {
        PipelineCmd::Run { dir, config, seed, k, tasks, examples, overrides } => {
            let dir = dir.unwrap_or_else(|| home.join("pipeline"));
            // Flags > config file > existing manifest > built-in preset.
            let mut cfg = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => match pipeline::ExperimentManifest::load(&dir)? {
                    Some(m) => m.config,
                    None => PipelineConfig::new(0, CorpusSpec::default(), overrides.base(Condition::Gist, 1)),
                },
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = tasks {
                cfg.corpus.num_tasks = t;
            }
            if let Some(e) = examples {
                cfg.corpus.num_examples = e;
            }
            cfg.train = overrides.apply(cfg.train);
            if let Some(k) = k {
                cfg.train.k = k;
            }
            let run = pipeline::run_pipeline(&dir, &cfg)?;
            for s in &run.ran {
                println!("ran     {s}");
            }
            for s in &run.skipped {
                println!("skipped {s}");
            }
            let report = pipeline::write_report(&dir)?;
            print!("{}", report.text);
            Ok(if report.complete { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        PipelineCmd::Report { dir } => {
            let dir = dir.unwrap_or_else(|| home.join("pipeline"));
            let report = pipeline::write_report(&dir)?;
            print!("{}", report.text);
            if !report.complete {
                eprintln!("error: report incomplete (stage missing)");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
