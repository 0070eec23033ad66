//! `care` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use care::checkpoint::{write_atomic, Checkpoint};
use care::config::Config;
use care::data::{generate_corpus, read_manifest, ManifestEntry, SynthSpec};
use care::downstream::{
    cached_pooled_banks, oracle, run_protocol, similarity_csv, similarity_report, utterance_bank, Fold, ProbeData,
    ProbeHyper, Targets, Task, TaskKind,
};
use care::model::ModelConfig;
use care::pretrain::{load_model, model_gradcheck, run_pretraining};
use care::tensor::gradcheck::{primitive_suite, DEFAULT_STEP};
use care::tensor::Tensor;

/// Errors above this fail `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Errors above this fail `metrics-oracle`.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "care", version, about = "Dual-encoder speech emotion representation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic emotional-speech corpus with train/val/test splits.
    SynthCorpus(SynthArgs),
    /// Pretrain a model with the dual distillation objective.
    Pretrain(PretrainArgs),
    /// Probe a frozen checkpoint on a labelled task over several seeds.
    Probe(ProbeArgs),
    /// Dump full layer banks for every manifest entry.
    Extract(ExtractArgs),
    /// Cosine similarity of branch representations over utterance pairs.
    Similarity(SimilarityArgs),
    /// Finite-difference check of every primitive and the composed loss.
    Gradcheck(GradcheckArgs),
    /// Compare the metrics against direct-definition oracles.
    MetricsOracle(OracleArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Valence/arousal/dominance labels instead of classes.
    #[arg(long)]
    attributes: bool,
    /// Reads the `[data]` section for noise and duration range.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Training manifest; repeat together with --val and --test for more folds.
    #[arg(long, required = true)]
    train: Vec<PathBuf>,
    #[arg(long, required = true)]
    val: Vec<PathBuf>,
    #[arg(long, required = true)]
    test: Vec<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// Number of probe seeds; defaults to the config value.
    #[arg(long)]
    seeds: Option<usize>,
    /// First probe seed; the others follow consecutively.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    /// Overrides the `[probe]` section echoed in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// both, semantic or acoustic.
    #[arg(long)]
    variant: Option<String>,
    /// Directory for pooled-bank caches.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimilarityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// 1-based paired layer; defaults to the middle one.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampled coordinates per parameter tensor in the model-level check.
    #[arg(long, default_value_t = 2)]
    per_tensor: usize,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: care::Error| e.to_string())
}

/// Failure that is the caller's fault: exit status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> i32 {
    let validation = err.chain().any(|c| {
        c.downcast_ref::<Invalid>().is_some() || c.downcast_ref::<care::Error>().is_some_and(care::Error::is_validation)
    });
    if validation {
        1
    } else {
        2
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<i32> {
    match cmd {
        Command::SynthCorpus(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Extract(a) => extract(a),
        Command::Similarity(a) => similarity(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::MetricsOracle(a) => metrics_oracle(a),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    })
}

fn manifest(path: &Path) -> anyhow::Result<Vec<ManifestEntry>> {
    Ok(read_manifest(path)?)
}

fn synth(a: SynthArgs) -> anyhow::Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec = SynthSpec::new(a.classes)?;
    spec.noise = cfg.data.synth_noise;
    spec.duration = (cfg.data.synth_min_seconds, cfg.data.synth_max_seconds);
    spec.validate()?;
    let corpus = generate_corpus(&spec, a.n, a.seed, &a.out, a.attributes)?;
    println!(
        "wrote {} utterances to {} (train {}, val {}, test {}, {} pairs)",
        corpus.all.len(),
        a.out.display(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        corpus.pairs.len() / 2
    );
    Ok(0)
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        if s == 0 {
            return Err(invalid("--steps must be at least 1"));
        }
        cfg.pretrain.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    let entries = manifest(&a.manifest)?;
    let resume = a.resume.as_deref().map(Checkpoint::read).transpose()?;
    let every = a.log_every;
    let run = run_pretraining(&entries, &cfg, &a.out, resume.as_ref(), |r| {
        if every > 0 && r.step % every == 0 {
            println!(
                "step {:>6}  l_sem {:.5}  l_acoust {:.5}  l_tot {:.5}  |g| {:.4}",
                r.step, r.l_sem, r.l_acoust, r.l_tot, r.grad_norm
            );
        }
    })?;
    println!("checkpoint {} after {} steps", a.out.display(), run.step_count());
    Ok(0)
}

fn probe(a: ProbeArgs) -> anyhow::Result<i32> {
    if a.train.len() != a.val.len() || a.train.len() != a.test.len() {
        return Err(invalid("--train, --val and --test must be given the same number of times"));
    }
    let bytes = std::fs::read(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(care::Error::from)?;
    let (echo, model) = load_model(&ckpt)?;
    let mut probe_cfg = match &a.config {
        Some(p) => Config::from_file(p)?.probe,
        None => echo.probe.clone(),
    };
    if let Some(e) = a.epochs {
        probe_cfg.epochs = e;
    }
    if let Some(v) = &a.variant {
        probe_cfg.variant = v.parse()?;
    }
    let n_seeds = a.seeds.unwrap_or(probe_cfg.seeds);
    if n_seeds == 0 || probe_cfg.epochs == 0 {
        return Err(invalid("--seeds and --epochs must be at least 1"));
    }
    let hyper = ProbeHyper {
        lr: probe_cfg.lr,
        weight_decay: probe_cfg.weight_decay,
        batch_size: probe_cfg.batch_size,
        epochs: probe_cfg.epochs,
        hidden: probe_cfg.hidden,
    };
    let pairs = model.config.semantic_layers;

    let mut folds = Vec::new();
    let mut task = None;
    for ((tr, va), te) in a.train.iter().zip(&a.val).zip(&a.test) {
        let splits = [manifest(tr)?, manifest(va)?, manifest(te)?];
        let labels: Vec<_> = splits.iter().flatten().map(|e| &e.label).collect();
        let t = Task::infer(a.task, &labels)?;
        if task.is_some_and(|prev| prev != t) {
            return Err(invalid("folds disagree on the number of classes"));
        }
        task = Some(t);
        let mut data = Vec::new();
        for entries in &splits {
            let pooled = cached_pooled_banks(&model, &bytes, entries, probe_cfg.max_seconds, a.cache.as_deref())?;
            let labels: Vec<_> = entries.iter().map(|e| &e.label).collect();
            let d = ProbeData {
                pooled,
                targets: Targets::from_labels(t, &labels)?,
            };
            data.push(d.with_variant(probe_cfg.variant, pairs)?);
        }
        let test = data.pop().unwrap();
        let val = data.pop().unwrap();
        let train = data.pop().unwrap();
        folds.push(Fold { train, val, test });
    }
    let task = task.expect("at least one fold");
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| a.seed + i).collect();
    let report = run_protocol(&folds, task, &seeds, &hyper)?;
    report.write(&a.report)?;
    for r in report.rows.iter().filter(|r| r.seed == "mean" && r.split == "test") {
        let std = report
            .rows
            .iter()
            .find(|s| s.seed == "std" && s.fold == r.fold && s.split == r.split && s.metric == r.metric)
            .map_or(0.0, |s| s.value);
        println!("fold {} test {}: {:.4} ± {:.4}", r.fold, r.metric, r.value, std);
    }
    Ok(0)
}

fn extract(a: ExtractArgs) -> anyhow::Result<i32> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let (cfg, model) = load_model(&ckpt)?;
    let entries = manifest(&a.manifest)?;
    let mut out = Checkpoint::new(cfg.to_ini());
    for e in &entries {
        let w = e.load_audio().with_context(|| format!("entry {}", e.id))?;
        let bank = utterance_bank(&model, &w, cfg.probe.max_seconds)?;
        for (label, t) in bank.labels.iter().zip(&bank.entries) {
            out.push(format!("{}.{label}", e.id), t.clone());
        }
        let mask = bank.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        out.push(format!("{}.valid", e.id), Tensor::vector(mask));
    }
    out.write(&a.out)?;
    println!("wrote banks for {} utterances to {}", entries.len(), a.out.display());
    Ok(0)
}

fn similarity(a: SimilarityArgs) -> anyhow::Result<i32> {
    let ckpt = Checkpoint::read(&a.ckpt)?;
    let (cfg, model) = load_model(&ckpt)?;
    let layer = a.layer.unwrap_or(model.config.semantic_layers.div_ceil(2));
    let pairs = manifest(&a.pairs)?;
    let rows = similarity_report(&model, &pairs, layer, cfg.probe.max_seconds)?;
    write_atomic(&a.report, similarity_csv(&rows).as_bytes())?;
    for branch in ["semantic", "acoustic"] {
        let v: Vec<f64> = rows.iter().filter(|r| r.branch == branch).map(|r| r.cosine).collect();
        println!("{branch}: mean cosine {:.4} over {} pairs", v.iter().sum::<f64>() / v.len().max(1) as f64, v.len());
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<i32> {
    let mut results = primitive_suite(a.seed)?;
    let model = model_gradcheck(&ModelConfig::desk(), a.seed, a.per_tensor, DEFAULT_STEP)?;
    results.push(("total loss (desk model)".into(), model));
    let mut ok = true;
    for (name, err) in &results {
        let pass = *err < GRADCHECK_TOLERANCE;
        ok &= pass;
        println!("{:<28} {err:.3e}  {}", name, if pass { "ok" } else { "FAIL" });
    }
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    Ok(if ok { 0 } else { 1 })
}

fn metrics_oracle(a: OracleArgs) -> anyhow::Result<i32> {
    if a.cases == 0 {
        bail!(invalid("--cases must be at least 1"));
    }
    let s = oracle::compare(a.cases, a.seed)?;
    println!("cases {}", s.cases);
    println!("weighted_f1 max deviation {:.3e}", s.wf1);
    println!("uar         max deviation {:.3e}", s.uar);
    println!("ccc         max deviation {:.3e}", s.ccc);
    Ok(if s.max() < ORACLE_TOLERANCE { 0 } else { 1 })
}
