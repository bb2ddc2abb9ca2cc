//! Command-line surface: initialize students, train with optional
//! distillation, evaluate perplexity, compare runs, and inspect checkpoints.
//!
//! Every option can come from a flat key=value config file (`--config`);
//! command-line flags override file entries. Exit codes: 0 success, 2 for
//! usage and configuration errors, 3 for numerical failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{Checkpoint, ModelConfig};
use crate::corpus::{Corpus, Tokenizer, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::initializers::{guide_init, lowrank_embed_init, random_student, uniform_init, InitReport};
use crate::selection::{select_layers, LayerStrategy};
use crate::training::{evaluate, gap_reduction, train, MetricLog, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "guide",
    version,
    about = "Initialize, train, and evaluate small transformer students drawn from a larger teacher"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create a student checkpoint from a teacher (or from scratch).
    Init(InitArgs),
    /// Train a checkpoint on a text corpus, optionally distilling from a teacher.
    Train(TrainArgs),
    /// Report held-out NLL and perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Tabulate several metric logs side by side with gap reductions.
    Compare(CompareArgs),
    /// Dump a checkpoint's header and tensor shapes.
    Inspect(InspectArgs),
}

/// Flat key=value settings file. Blank lines and `#` comments are ignored;
/// values never contain newlines. Flags take precedence over file entries.
#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {} has no '=': {:?}", lineno + 1, raw))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::invalid(format!("config line {} has an empty key", lineno + 1)));
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("duplicate config key {:?}", key)));
            }
        }
        Ok(KvConfig { map })
    }

    pub fn load(path: Option<&Path>) -> Result<KvConfig> {
        match path {
            Some(p) => KvConfig::parse(&std::fs::read_to_string(p)?),
            None => Ok(KvConfig::default()),
        }
    }

    /// Flag value if the flag was given, else the parsed file entry.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.map.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::invalid(format!("config key {} has unparsable value {:?}", key, raw))),
            None => Ok(None),
        }
    }

    /// True if the boolean flag was set on the command line or in the file.
    pub fn pick_flag(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.map.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::invalid(format!(
                "config key {} must be true/false, got {:?}",
                key, other
            ))),
        }
    }
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::invalid(format!("missing required option --{}", key)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitMethod {
    Random,
    Guide,
    Uniform,
    LowrankEmbed,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<InitMethod> {
        match s {
            "random" => Ok(InitMethod::Random),
            "guide" => Ok(InitMethod::Guide),
            "uniform" => Ok(InitMethod::Uniform),
            "lowrank-embed" => Ok(InitMethod::LowrankEmbed),
            other => Err(Error::invalid(format!(
                "unknown init method {:?}; expected random, guide, uniform, or lowrank-embed",
                other
            ))),
        }
    }
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// key=value settings file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// random | guide | uniform | lowrank-embed
    #[arg(long)]
    pub method: Option<String>,
    /// Teacher checkpoint (required for every method except random)
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report path (default: <out>.report.txt)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Block mapping: embed-only | top | top+last | first-n | {k}-even
    #[arg(long)]
    pub layers: Option<String>,
    /// Student width (defaults to the teacher's)
    #[arg(long)]
    pub dim: Option<usize>,
    /// Student block count (defaults to the teacher's)
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Student head count (defaults to the teacher's)
    #[arg(long)]
    pub heads: Option<usize>,
    /// Student per-head width (defaults to the teacher's)
    #[arg(long = "head-dim")]
    pub head_dim: Option<usize>,
    /// Student MLP hidden width (defaults to the teacher's)
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Vocabulary size (must match the teacher when one is given)
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Context length (must match the teacher when one is given)
    #[arg(long)]
    pub ctx: Option<usize>,
    /// Seed for every randomly filled tensor
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value settings file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to start from
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Plain-text training corpus (documents separated by blank lines)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Token-per-line vocabulary file (default: raw byte tokenizer)
    #[arg(long = "vocab-file")]
    pub vocab_file: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metric CSV path (default: <out>.metrics.csv)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Optimizer steps to run
    #[arg(long)]
    pub steps: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sequences per batch
    #[arg(long)]
    pub batch: Option<usize>,
    /// Tokens per sequence (default: the checkpoint's context length)
    #[arg(long)]
    pub window: Option<usize>,
    /// Shuffle seed for the training shard
    #[arg(long = "data-seed")]
    pub data_seed: Option<u64>,
    /// Steps between held-out evaluations
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Held-out batches per evaluation
    #[arg(long = "eval-batches")]
    pub eval_batches: Option<usize>,
    /// Warmup steps (default: 5% of --steps)
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Add the distillation term (requires --teacher)
    #[arg(long)]
    pub distill: bool,
    /// Frozen teacher checkpoint for distillation
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Distillation weight (default 0.5 with --distill)
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// key=value settings file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus whose held-out shard is scored
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Token-per-line vocabulary file (default: raw byte tokenizer)
    #[arg(long = "vocab-file")]
    pub vocab_file: Option<PathBuf>,
    /// Sequences per batch
    #[arg(long)]
    pub batch: Option<usize>,
    /// Tokens per sequence (default: the checkpoint's context length)
    #[arg(long)]
    pub window: Option<usize>,
    /// Held-out batches to score (default: the whole shard)
    #[arg(long = "eval-batches")]
    pub eval_batches: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Labeled metric CSVs, as label=path; repeat per run
    #[arg(long = "run", value_name = "LABEL=PATH")]
    pub runs: Vec<String>,
    /// Label of the teacher reference run
    #[arg(long)]
    pub teacher: Option<String>,
    /// Label of the baseline run gap reductions are measured against
    #[arg(long)]
    pub baseline: Option<String>,
    /// Write a long-format per-step CSV here for plotting
    #[arg(long = "out-csv")]
    pub out_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint to describe
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Dispatches a parsed command line, writing human output to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn default_sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let method: InitMethod = require(kv.pick(args.method, "method")?, "method")?.parse()?;
    let out: PathBuf = require(kv.pick(args.out, "out")?, "out")?;
    let report_path =
        kv.pick(args.report, "report")?.unwrap_or_else(|| default_sibling(&out, ".report.txt"));
    let seed = kv.pick(args.seed, "seed")?.unwrap_or(0);

    let teacher = match kv.pick(args.teacher, "teacher")? {
        Some(path) => Some(Checkpoint::load(&path)?),
        None => None,
    };
    if method != InitMethod::Random && teacher.is_none() {
        return Err(Error::invalid("this method needs --teacher"));
    }

    let dim = kv.pick(args.dim, "dim")?;
    let blocks = kv.pick(args.blocks, "blocks")?;
    let heads = kv.pick(args.heads, "heads")?;
    let head_dim = kv.pick(args.head_dim, "head-dim")?;
    let ffn = kv.pick(args.ffn, "ffn")?;
    let vocab = kv.pick(args.vocab, "vocab")?;
    let ctx = kv.pick(args.ctx, "ctx")?;

    let student = match &teacher {
        Some(t) => ModelConfig {
            dim: dim.unwrap_or(t.config.dim),
            n_blocks: blocks.unwrap_or(t.config.n_blocks),
            n_heads: heads.unwrap_or(t.config.n_heads),
            head_dim: head_dim.unwrap_or(t.config.head_dim),
            ffn: ffn.unwrap_or(t.config.ffn),
            vocab: vocab.unwrap_or(t.config.vocab),
            ctx: ctx.unwrap_or(t.config.ctx),
        },
        None => ModelConfig {
            dim: require(dim, "dim")?,
            n_blocks: require(blocks, "blocks")?,
            n_heads: require(heads, "heads")?,
            head_dim: require(head_dim, "head-dim")?,
            ffn: require(ffn, "ffn")?,
            vocab: vocab.unwrap_or(BYTE_VOCAB),
            ctx: require(ctx, "ctx")?,
        },
    };

    let strategy: LayerStrategy =
        kv.pick(args.layers, "layers")?.unwrap_or_else(|| "top".to_string()).parse()?;

    let (ck, report): (Checkpoint, InitReport) = match method {
        InitMethod::Random => random_student(&student, seed)?,
        InitMethod::Guide | InitMethod::Uniform => {
            let t = teacher
                .as_ref()
                .ok_or_else(|| Error::invalid("this method needs --teacher"))?;
            let layers = select_layers(strategy, student.n_blocks, t.config.n_blocks)?;
            if method == InitMethod::Guide {
                guide_init(t, &student, &layers, seed)?
            } else {
                uniform_init(t, &student, &layers, seed)?
            }
        }
        InitMethod::LowrankEmbed => {
            let t = teacher
                .as_ref()
                .ok_or_else(|| Error::invalid("this method needs --teacher"))?;
            lowrank_embed_init(t, &student, seed)?
        }
    };

    ck.save(&out)?;
    std::fs::write(&report_path, report.render())?;
    println!(
        "wrote {} ({} params) and {}",
        out.display(),
        ck.config.param_count(),
        report_path.display()
    );
    Ok(())
}

fn load_tokenizer(vocab_file: Option<&Path>) -> Result<Tokenizer> {
    match vocab_file {
        Some(p) => Tokenizer::from_vocab_file(p),
        None => Ok(Tokenizer::byte()),
    }
}

fn check_tokenizer(ck: &Checkpoint, tok: &Tokenizer, what: &str) -> Result<()> {
    if ck.tokenizer != tok.fingerprint() {
        return Err(Error::ConfigMismatch(format!(
            "{} was built for tokenizer {:?}, corpus uses {:?}",
            what,
            ck.tokenizer,
            tok.fingerprint()
        )));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let ck_path: PathBuf = require(kv.pick(args.checkpoint, "checkpoint")?, "checkpoint")?;
    let corpus_path: PathBuf = require(kv.pick(args.corpus, "corpus")?, "corpus")?;
    let out: PathBuf = require(kv.pick(args.out, "out")?, "out")?;
    let metrics_path =
        kv.pick(args.metrics, "metrics")?.unwrap_or_else(|| default_sibling(&out, ".metrics.csv"));

    let student = Checkpoint::load(&ck_path)?;
    let tok = load_tokenizer(kv.pick(args.vocab_file, "vocab-file")?.as_deref())?;
    check_tokenizer(&student, &tok, "checkpoint")?;

    let steps = require(kv.pick(args.steps, "steps")?, "steps")?;
    let lr = require(kv.pick(args.lr, "lr")?, "lr")?;
    let mut cfg = TrainConfig::new(steps, lr);
    cfg.warmup_steps = kv.pick(args.warmup, "warmup")?;
    if let Some(e) = kv.pick(args.eval_every, "eval-every")? {
        cfg.eval_every = e;
    }
    if let Some(e) = kv.pick(args.eval_batches, "eval-batches")? {
        cfg.eval_batches = e;
    }

    let distill = kv.pick_flag(args.distill, "distill")?;
    let teacher = match kv.pick(args.teacher, "teacher")? {
        Some(p) => Some(Checkpoint::load(&p)?),
        None => None,
    };
    let alpha = kv.pick(args.alpha, "alpha")?;
    if distill {
        if teacher.is_none() {
            return Err(Error::invalid("--distill requires --teacher"));
        }
        cfg.distill_alpha = Some(alpha.unwrap_or(0.5));
    } else if alpha.is_some() {
        return Err(Error::invalid("--alpha only makes sense with --distill"));
    }
    if let Some(t) = &teacher {
        check_tokenizer(t, &tok, "teacher checkpoint")?;
    }

    let batch = kv.pick(args.batch, "batch")?.unwrap_or(4);
    let window = kv.pick(args.window, "window")?.unwrap_or(student.config.ctx);
    let data_seed = kv.pick(args.data_seed, "data-seed")?.unwrap_or(0);
    let corpus = Corpus::from_file(&corpus_path, &tok)?;
    let (train_stream, eval_stream) = corpus.streams(batch, window, data_seed)?;

    let (trained, log) = train(&student, teacher.as_ref(), &train_stream, &eval_stream, &cfg)?;
    trained.save(&out)?;
    log.write_csv(&metrics_path)?;
    println!("summary: {}", log.summary());
    println!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let ck_path: PathBuf = require(kv.pick(args.checkpoint, "checkpoint")?, "checkpoint")?;
    let corpus_path: PathBuf = require(kv.pick(args.corpus, "corpus")?, "corpus")?;

    let ck = Checkpoint::load(&ck_path)?;
    let tok = load_tokenizer(kv.pick(args.vocab_file, "vocab-file")?.as_deref())?;
    check_tokenizer(&ck, &tok, "checkpoint")?;

    let batch = kv.pick(args.batch, "batch")?.unwrap_or(4);
    let window = kv.pick(args.window, "window")?.unwrap_or(ck.config.ctx);
    let corpus = Corpus::from_file(&corpus_path, &tok)?;
    let (_, eval_stream) = corpus.streams(batch, window, 0)?;
    let num_batches =
        kv.pick(args.eval_batches, "eval-batches")?.unwrap_or(eval_stream.batches_per_epoch());

    let (nll, ppl) = evaluate(&ck, &eval_stream, num_batches)?;
    println!("eval_loss={:.6} eval_ppl={:.6}", nll, ppl);
    Ok(())
}

struct RunSummary {
    label: String,
    log: MetricLog,
}

fn parse_runs(specs: &[String]) -> Result<Vec<RunSummary>> {
    if specs.is_empty() {
        return Err(Error::invalid("compare needs at least one --run label=path"));
    }
    let mut runs = Vec::new();
    for spec in specs {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--run {:?} is not label=path", spec)))?;
        if runs.iter().any(|r: &RunSummary| r.label == label) {
            return Err(Error::invalid(format!("duplicate run label {:?}", label)));
        }
        runs.push(RunSummary {
            label: label.to_string(),
            log: MetricLog::read_csv(Path::new(path))?,
        });
    }
    Ok(runs)
}

fn final_ppl(runs: &[RunSummary], label: &str) -> Result<f64> {
    let run = runs
        .iter()
        .find(|r| r.label == label)
        .ok_or_else(|| Error::invalid(format!("no --run with label {:?}", label)))?;
    run.log
        .final_record()
        .map(|r| r.eval_ppl)
        .ok_or_else(|| Error::invalid(format!("run {:?} has no records", label)))
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let runs = parse_runs(&args.runs)?;
    let reference = match (&args.baseline, &args.teacher) {
        (Some(b), Some(t)) => Some((final_ppl(&runs, b)?, final_ppl(&runs, t)?)),
        (None, None) => None,
        _ => {
            return Err(Error::invalid(
                "gap reduction needs both --baseline and --teacher labels",
            ))
        }
    };

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<16} {:>12} {:>12} {:>12} {:>16}",
        "run", "final_loss", "final_ppl", "clip_events", "gap_reduction_%"
    );
    for run in &runs {
        let rec = run
            .log
            .final_record()
            .ok_or_else(|| Error::invalid(format!("run {:?} has no records", run.label)))?;
        let gap = match reference {
            Some((baseline, teacher)) => {
                format!("{:>16.2}", gap_reduction(rec.eval_ppl, baseline, teacher)?)
            }
            None => format!("{:>16}", "-"),
        };
        let _ = writeln!(
            table,
            "{:<16} {:>12.6} {:>12.6} {:>12} {}",
            run.label, rec.eval_loss, rec.eval_ppl, rec.clip_events, gap
        );
    }
    print!("{}", table);

    if let Some(path) = args.out_csv {
        let mut csv = String::from("label,step,train_loss,eval_loss,eval_ppl,clip_events\n");
        for run in &runs {
            for r in run.log.records() {
                let train = r.train_loss.map(|v| format!("{:.6}", v)).unwrap_or_default();
                let _ = writeln!(
                    csv,
                    "{},{},{},{:.6},{:.6},{}",
                    run.label, r.step, train, r.eval_loss, r.eval_ppl, r.clip_events
                );
            }
        }
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let path = require(args.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    let c = &ck.config;
    println!(
        "config: dim={} blocks={} heads={} head_dim={} ffn={} vocab={} ctx={}",
        c.dim, c.n_blocks, c.n_heads, c.head_dim, c.ffn, c.vocab, c.ctx
    );
    println!("step: {}", ck.step);
    println!("tokenizer: {}", ck.tokenizer);
    println!("params: {}", c.param_count());
    println!("content_hash: {:016x}", ck.content_hash()?);
    println!("tensors:");
    for (name, t) in ck.tensors() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        println!("  {:<18} {}", name, dims.join("x"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_config_parses_and_merges() {
        let kv = KvConfig::parse("# comment\nsteps = 100\nlr=0.002\n\nmethod=guide\n").unwrap();
        assert_eq!(kv.pick::<usize>(None, "steps").unwrap(), Some(100));
        assert_eq!(kv.pick::<f64>(None, "lr").unwrap(), Some(0.002));
        // flag wins over file
        assert_eq!(kv.pick::<usize>(Some(7), "steps").unwrap(), Some(7));
        // absent key stays absent
        assert_eq!(kv.pick::<usize>(None, "batch").unwrap(), None);
        assert!(kv.pick::<usize>(None, "method").is_err());

        assert!(KvConfig::parse("novalue\n").is_err());
        assert!(KvConfig::parse("a=1\na=2\n").is_err());
        assert!(KvConfig::parse("=5\n").is_err());
    }

    #[test]
    fn kv_flags_parse_booleans() {
        let kv = KvConfig::parse("distill=true\nother=false\n").unwrap();
        assert!(kv.pick_flag(false, "distill").unwrap());
        assert!(!kv.pick_flag(false, "other").unwrap());
        assert!(kv.pick_flag(true, "other").unwrap());
        assert!(!kv.pick_flag(false, "absent").unwrap());
        let bad = KvConfig::parse("distill=yes\n").unwrap();
        assert!(bad.pick_flag(false, "distill").is_err());
    }

    #[test]
    fn init_method_parsing() {
        assert_eq!("guide".parse::<InitMethod>().unwrap(), InitMethod::Guide);
        assert_eq!("lowrank-embed".parse::<InitMethod>().unwrap(), InitMethod::LowrankEmbed);
        assert!("pca".parse::<InitMethod>().is_err());
    }

    #[test]
    fn sibling_paths_append_suffix() {
        assert_eq!(
            default_sibling(Path::new("/tmp/x/student.ck"), ".report.txt"),
            PathBuf::from("/tmp/x/student.ck.report.txt")
        );
        assert_eq!(
            default_sibling(Path::new("student.ck"), ".metrics.csv"),
            PathBuf::from("student.ck.metrics.csv")
        );
    }

    #[test]
    fn run_specs_must_be_labeled_and_unique() {
        assert!(parse_runs(&[]).is_err());
        assert!(parse_runs(&["plain.csv".to_string()]).is_err());
        let err = parse_runs(&["a=x.csv".to_string(), "a=y.csv".to_string()]);
        assert!(err.is_err());
    }
}
