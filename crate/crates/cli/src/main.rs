//! `hierclip` command-line entry point.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! runtime failures. Failures print one `error: <Kind>: <message>` line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hierclip::data::{
    concept_token, load_manifest, manifest_to_string, synthesize_dataset, SynthSpec, PHASE_WORDS,
};
use hierclip::downstream::{probe_on_dataset, zero_shot_on_dataset};
use hierclip::encoders::QueryEncoder;
use hierclip::eval::{
    load_templates, Mode, PromptStyle, PromptTemplate, SvmConfig, ZeroShotConfig,
};
use hierclip::frames::FrameStore;
use hierclip::memory_bank::MemoryBank;
use hierclip::persist::{write_atomic, Checkpoint, VERSION};
use hierclip::trainer::{encoders_from_checkpoint, run_pretraining, TrainConfig};
use hierclip::Error;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "hierclip",
    version,
    about = "Hierarchical retrieval-augmented video-text pretraining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset manifest.
    Synth(SynthArgs),
    /// Run hierarchical pretraining.
    Pretrain(PretrainArgs),
    /// Build a memory bank from the silent videos of a manifest.
    KbBuild(KbBuildArgs),
    /// Query a memory bank with a title.
    KbRetrieve(KbRetrieveArgs),
    /// Memory bank commands (`kb build`, `kb retrieve`).
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Zero-shot recognition on a labeled manifest.
    EvalZeroshot(EvalArgs),
    /// Linear probing on frozen visual features.
    Probe(ProbeArgs),
}

#[derive(Subcommand)]
enum KbCommand {
    Build(KbBuildArgs),
    Retrieve(KbRetrieveArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n_narrative: usize,
    #[arg(long, default_value_t = 4)]
    n_silent: usize,
    /// Clips per video.
    #[arg(long, default_value_t = 3)]
    clips: usize,
    #[arg(long, default_value_t = 4)]
    concepts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add per-frame concept labels for downstream evaluation.
    #[arg(long)]
    labeled: bool,
    /// Also write a prompt-template file for the concept labels.
    #[arg(long)]
    prompts_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Flat YAML config; unspecified keys take the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Within-query-only silent loss (no cross-query negatives).
    #[arg(long, alias = "eq7-literal")]
    within_query_only: bool,
}

#[derive(Args)]
struct KbBuildArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KbRetrieveArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    title: String,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Caption,
    Keyword,
    Mix,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Multi,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Prompt templates: label -> {caption, phase, instrument, medication, goal}.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, value_enum, default_value_t = StyleArg::Caption)]
    prompt_style: StyleArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    tau_eval: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Optional label file; defaults to the sorted labels found in the manifest.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(format!("{}: {e}", e.kind()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn synth(args: SynthArgs) -> CmdResult {
    let spec = SynthSpec {
        n_narrative: args.n_narrative,
        n_silent: args.n_silent,
        clips_per_video: args.clips,
        n_concepts: args.concepts,
    };
    let ds = synthesize_dataset(&spec, args.seed, args.labeled).map_err(usage)?;
    write_atomic(&args.out, manifest_to_string(&ds)?.as_bytes())?;
    if let Some(path) = args.prompts_out {
        let templates: std::collections::BTreeMap<String, PromptTemplate> = (0..args.concepts)
            .map(|c| {
                let phase = PHASE_WORDS[c % PHASE_WORDS.len()];
                (
                    concept_token(c),
                    PromptTemplate {
                        caption: Some(format!("{} {phase}", concept_token(c))),
                        phase: Some(format!("{} {phase}", concept_token(c))),
                        instrument: Some("unspecified".into()),
                        medication: Some("None".into()),
                        goal: Some(format!("complete {phase}")),
                        ..PromptTemplate::default()
                    },
                )
            })
            .collect();
        write_json(
            &path,
            &serde_json::to_value(templates).map_err(Error::from)?,
        )?;
    }
    Ok(())
}

fn pretrain(args: PretrainArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_yaml_file(path).map_err(usage)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.total_epochs = epochs;
        cfg.warmup_clip_epochs = cfg.warmup_clip_epochs.min(epochs);
    }
    if args.within_query_only {
        cfg.cross_query_negatives = false;
    }
    cfg.validate().map_err(usage)?;
    let ds = load_manifest(&args.manifest)?;
    let summary = run_pretraining(&ds, &cfg, &args.out, args.resume)?;
    println!("{}", summary.checkpoint.display());
    Ok(())
}

fn kb_build(args: KbBuildArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (encoders, cfg) = encoders_from_checkpoint(&ck)?;
    let ds = load_manifest(&args.manifest)?;
    let store = FrameStore::new(cfg.image_size);
    let bank = MemoryBank::build(&ds, &ds.silent_videos(), &encoders, &store, cfg.n_frames)?;
    bank.save(&args.out)?;
    println!("{} entries", bank.len());
    Ok(())
}

fn kb_retrieve(args: KbRetrieveArgs) -> CmdResult {
    let bank = MemoryBank::load(&args.bank)?;
    if bank.is_empty() {
        return Err(Error::EmptyBank.into());
    }
    let query = QueryEncoder::new(bank.query_spec()).encode(&args.title)?;
    for hit in bank.retrieve(query.view(), args.k)?.hits {
        println!("{}\t{:.6}", hit.entry_id, hit.score);
    }
    Ok(())
}

fn eval_zeroshot(args: EvalArgs) -> CmdResult {
    let templates = load_templates(&args.labels)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (encoders, cfg) = encoders_from_checkpoint(&ck)?;
    let ds = load_manifest(&args.manifest)?;
    let style = match args.prompt_style {
        StyleArg::Caption => PromptStyle::Caption,
        StyleArg::Keyword => PromptStyle::Keyword,
        StyleArg::Mix => PromptStyle::Mix,
    };
    let zs = ZeroShotConfig {
        mode: match args.mode {
            ModeArg::Single => Mode::Single,
            ModeArg::Multi => Mode::Multi,
        },
        threshold: args.threshold,
        tau_eval: args.tau_eval,
    };
    let store = FrameStore::new(cfg.image_size);
    let report = zero_shot_on_dataset(&ds, &encoders, &store, &templates, style, &zs)?;
    write_json(
        &args.out,
        &json!({
            "version": VERSION,
            "config": {"zero_shot": zs, "train": cfg},
            "report": report,
        }),
    )
}

fn probe(args: ProbeArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (encoders, cfg) = encoders_from_checkpoint(&ck)?;
    let ds = load_manifest(&args.manifest)?;
    let labels: Vec<String> = match &args.labels {
        Some(path) => load_templates(path)?.into_keys().collect(),
        None => ds
            .clips()
            .filter_map(|c| c.frame_labels.as_ref())
            .flatten()
            .flatten()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let svm = SvmConfig {
        seed: args.seed,
        ..SvmConfig::default()
    };
    let store = FrameStore::new(cfg.image_size);
    let result = probe_on_dataset(&ds, &encoders, &store, &labels, args.fraction, &svm)?;
    write_json(
        &args.out,
        &json!({
            "version": VERSION,
            "config": {"svm": svm, "fraction": args.fraction, "train": cfg},
            "labels": labels,
            "result": result,
        }),
    )
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::KbBuild(a)
        | Command::Kb {
            command: KbCommand::Build(a),
        } => kb_build(a),
        Command::KbRetrieve(a)
        | Command::Kb {
            command: KbCommand::Retrieve(a),
        } => kb_retrieve(a),
        Command::EvalZeroshot(a) => eval_zeroshot(a),
        Command::Probe(a) => probe(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid usage");
            eprintln!("error: UsageError: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
