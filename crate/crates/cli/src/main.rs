//! `sdlm`: train, decode, evaluate and benchmark block-prediction models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sdlm::bench::{ablation_study, eval_task, generation_room, sweep_tau, write_ablation_csv, EvalResult};
use sdlm::corpus::{build_vocab, gen_samples, read_jsonl, write_jsonl, Sample, Task, Vocab};
use sdlm::decode::{generate, Confidence, DecodeConfig, DecodeMode};
use sdlm::net::{init_params, load_checkpoint, save_checkpoint, Checkpoint};
use sdlm::trainer::{train, write_loss_csv};
use sdlm::SdlmError;

use config::{seed_from_env, RunConfig};

#[derive(Parser)]
#[command(name = "sdlm", version, about = "Block-parallel training and longest-prefix decoding for small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config; writes checkpoint, loss CSV and held-out metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode one prompt.
    Generate(GenerateArgs),
    /// Exact-match accuracy and tokens per pass on held-out samples.
    Eval(EvalArgs),
    /// Sweep tau and confidence kinds; writes CSV and a markdown table.
    Bench(BenchArgs),
    /// Train baseline, no-shift and causal-intra variants under one budget.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Task vocabulary; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 0.98)]
    tau: f64,
    #[arg(long, default_value = "logit")]
    conf: Confidence,
    #[arg(long, default_value = "greedy")]
    mode: DecodeMode,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Must match the checkpoint's block size when given.
    #[arg(long)]
    block_size: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// JSONL samples (e.g. the `eval.jsonl` written by `train`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Otherwise generate this many fresh samples.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Sample seed; falls back to SDLM_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Prompt body; the response-start marker is appended automatically.
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Bracket the run accepted at each step.
    #[arg(long)]
    show_blocks: bool,
    /// Write the decode trace as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Write the summary JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Descending list.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.98,0.9,0.7,0.5")]
    taus: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "logit,entropy")]
    conf_list: Vec<Confidence>,
    #[arg(long, default_value = "greedy")]
    mode: DecodeMode,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Repetitions per row for the wall-clock median.
    #[arg(long, default_value_t = sdlm::bench::WALL_CLOCK_REPS)]
    reps: usize,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: error.into() }
}

impl From<SdlmError> for Failure {
    fn from(e: SdlmError) -> Self {
        match e {
            SdlmError::Config(_) | SdlmError::UnknownSymbol(_) => usage(e),
            _ => runtime(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Generate(args) => cmd_generate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Ablate { config } => cmd_ablate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, Failure> {
    let config = RunConfig::load(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(usage)?;
    Ok(config.resolve(seed_from_env()?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn create_file(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(runtime)
}

fn prepare_out_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    accuracy: f64,
    token_accuracy: f64,
    tokens_per_pass: f64,
    generated_tokens: usize,
    forward_passes: usize,
    steps: usize,
}

impl EvalSummary {
    fn new(eval: &EvalResult) -> Self {
        EvalSummary {
            samples: eval.samples.len(),
            accuracy: eval.accuracy,
            token_accuracy: eval.token_accuracy,
            tokens_per_pass: eval.tokens_per_pass(),
            generated_tokens: eval.generated_tokens(),
            forward_passes: eval.forward_passes(),
            steps: eval.steps(),
        }
    }
}

fn cmd_train(path: &Path) -> CmdResult {
    let cfg = load_run_config(path)?;
    let out = cfg.out_dir.clone();
    prepare_out_dir(&out)?;
    write_json(&out.join("config.resolved.json"), &cfg)?;

    let range = (cfg.data.min_len, cfg.data.max_len);
    let train_samples = gen_samples(&cfg.task, cfg.data.train_samples, cfg.seed, range)?;
    let eval_samples = gen_samples(&cfg.task, cfg.data.eval_samples, cfg.eval_seed(), range)?;
    write_jsonl(create_file(&out.join("eval.jsonl"))?, &eval_samples)?;

    let model = init_params(&cfg.model_config()?, cfg.seed)?;
    eprintln!(
        "training {} parameters on {} {} samples for {} steps",
        model.num_params(),
        train_samples.len(),
        cfg.task,
        cfg.train.steps
    );
    let outcome = train(&cfg.train, model, &train_samples)?;
    save_checkpoint(&out.join("model.ckpt"), &outcome.params, Some(&cfg.task))?;
    write_loss_csv(create_file(&out.join("loss.csv"))?, &outcome.history)?;

    let eval = eval_task(&outcome.params, &eval_samples, &cfg.decode)?;
    let summary = EvalSummary::new(&eval);
    write_json(&out.join("eval.json"), &summary)?;
    if let Some(last) = outcome.history.last() {
        println!("final loss {:.4}", last.loss);
    }
    println!(
        "held-out exact match {:.3}, tokens/pass {:.3} (tau {}, {})",
        summary.accuracy, summary.tokens_per_pass, cfg.decode.tau, cfg.decode.confidence
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Checkpoint plus the vocabulary it should be read with.
fn open_model(args: &ModelArgs) -> Result<(Checkpoint, Task, Vocab), Failure> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let name = match (&args.task, &ckpt.task) {
        (Some(flag), Some(recorded)) if flag != recorded => {
            return Err(usage(anyhow!("--task {flag} but checkpoint was trained on {recorded}")));
        }
        (Some(flag), _) => flag.clone(),
        (None, Some(recorded)) => recorded.clone(),
        (None, None) => return Err(usage(anyhow!("checkpoint records no task; pass --task"))),
    };
    let task: Task = name.parse()?;
    let vocab = build_vocab(&name)?;
    if vocab.len() != ckpt.params.config().vocab_size {
        return Err(usage(anyhow!(
            "task {name} has {} tokens but checkpoint expects {}",
            vocab.len(),
            ckpt.params.config().vocab_size
        )));
    }
    Ok((ckpt, task, vocab))
}

fn decode_config(args: &DecodeArgs, ckpt: &Checkpoint) -> Result<DecodeConfig, Failure> {
    let d = ckpt.params.config().block_size;
    if let Some(flag) = args.block_size {
        if flag != d {
            return Err(usage(anyhow!("--block-size {flag} but checkpoint block size is {d}")));
        }
    }
    let cfg = DecodeConfig {
        tau: args.tau,
        confidence: args.conf,
        mode: args.mode,
        max_new_tokens: args.max_tokens,
        block_size: d,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples(args: &DataArgs, task: Task) -> Result<Vec<Sample>, Failure> {
    if let Some(path) = &args.data {
        let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(usage)?;
        return Ok(read_jsonl(BufReader::new(file))?);
    }
    let seed = match args.seed {
        Some(s) => s,
        None => seed_from_env()?.unwrap_or(0),
    };
    Ok(gen_samples(task.name(), args.samples, seed, (args.min_len, args.max_len))?)
}

#[derive(Serialize)]
struct GenerateRecord<'a> {
    prompt: &'a str,
    output: &'a [u32],
    text: String,
    trace: &'a sdlm::decode::DecodeTrace,
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    let (ckpt, task, vocab) = open_model(&args.model)?;
    let mut cfg = decode_config(&args.decode, &ckpt)?;
    let prompt = task.format_prompt(&vocab, &args.prompt)?;
    let room = generation_room(ckpt.params.config(), prompt.len());
    if room == 0 {
        return Err(usage(anyhow!("prompt of {} tokens leaves no room to generate", prompt.len())));
    }
    cfg.max_new_tokens = cfg.max_new_tokens.min(room);
    let (output, trace) = generate(&ckpt.params, &prompt, &cfg)?;

    let body = match output.split_last() {
        Some((&last, rest)) if last == vocab.eos_id => rest,
        _ => &output[..],
    };
    let text = vocab.decode(body);
    if args.show_blocks {
        let shown: String = trace.runs(&output).iter().map(|run| format!("[{}]", vocab.decode(run))).collect();
        println!("{shown}");
    } else {
        println!("{text}");
    }
    eprintln!(
        "{} tokens in {} steps, {} forward passes ({:.2} tokens/pass)",
        trace.generated_tokens,
        trace.steps.len(),
        trace.forward_passes,
        trace.tokens_per_pass()
    );
    if let Some(path) = &args.trace {
        write_json(path, &GenerateRecord { prompt: &args.prompt, output: &output, text, trace: &trace })?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let (ckpt, task, _) = open_model(&args.model)?;
    let cfg = decode_config(&args.decode, &ckpt)?;
    let samples = load_samples(&args.data, task)?;
    let eval = eval_task(&ckpt.params, &samples, &cfg)?;
    let summary = EvalSummary::new(&eval);
    let text = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    println!("{text}");
    if let Some(path) = &args.out {
        write_json(path, &summary)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchEcho<'a> {
    ckpt: &'a Path,
    task: &'a str,
    taus: &'a [f64],
    confidences: &'a [Confidence],
    decode: DecodeConfig,
    reps: usize,
    data: Option<&'a Path>,
    samples: usize,
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let (ckpt, task, _) = open_model(&args.model)?;
    let decode = DecodeArgs { tau: 1.0, conf: Confidence::Logit, mode: args.mode, max_tokens: args.max_tokens, block_size: None };
    let base = decode_config(&decode, &ckpt)?;
    let samples = load_samples(&args.data, task)?;
    prepare_out_dir(&args.out)?;
    write_json(
        &args.out.join("config.resolved.json"),
        &BenchEcho {
            ckpt: &args.model.ckpt,
            task: task.name(),
            taus: &args.taus,
            confidences: &args.conf_list,
            decode: base,
            reps: args.reps,
            data: args.data.data.as_deref(),
            samples: samples.len(),
        },
    )?;

    let report = sweep_tau(&ckpt.params, task.name(), &samples, &args.taus, &args.conf_list, &base, args.reps)?;
    report.write_csv(create_file(&args.out.join("bench.csv"))?)?;
    let table = report.to_markdown();
    let mut md = create_file(&args.out.join("bench.md"))?;
    md.write_all(table.as_bytes()).map_err(runtime)?;
    md.flush().map_err(runtime)?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(path: &Path) -> CmdResult {
    let cfg = load_run_config(path)?;
    let out = cfg.out_dir.clone();
    prepare_out_dir(&out)?;
    write_json(&out.join("config.resolved.json"), &cfg)?;
    let range = (cfg.data.min_len, cfg.data.max_len);
    let train_samples = gen_samples(&cfg.task, cfg.data.train_samples, cfg.seed, range)?;
    let eval_samples = gen_samples(&cfg.task, cfg.data.eval_samples, cfg.eval_seed(), range)?;
    let rows = ablation_study(&cfg.model_config()?, &cfg.train, cfg.seed, &train_samples, &eval_samples, &cfg.decode)?;
    write_ablation_csv(create_file(&out.join("ablation.csv"))?, &rows)?;
    for r in &rows {
        println!(
            "{:<13} loss {:.4}  exact {:.3}  tokens/pass {:.3}",
            r.variant, r.final_loss, r.accuracy, r.tokens_per_pass
        );
    }
    Ok(())
}
