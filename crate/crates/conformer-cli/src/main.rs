//! `conformer-lm`: train, evaluate, sample, and ablate causal-conv
//! augmented decoder language models on character or raw-audio streams.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error.

mod ablate;
mod runspec;
mod tables;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use conformer::data::{
    load_audio_u8, load_text8, split_stream, text8_byte_to_id, text8_id_to_byte, AudioFormat,
    StreamSource, TokenStream,
};
use conformer::model::{count_parameters, generate, load_checkpoint, ConvPlacement};
use conformer::train::{
    append_metrics_csv, default_lr_phases, evaluate, train, MetricsRecord, Split, Streams,
};
use runspec::{parse_lr_schedule, parse_ratios, read_config_file, ConvChoice, RunSpec};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable providing the default output root when `--out`
/// is not given.
pub const OUT_ENV: &str = "CONFORMER_LM_OUT";

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "conformer-lm",
    version,
    about = "Causal-convolution-augmented decoder language model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics + checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Sample a continuation from a checkpoint.
    Generate(GenerateArgs),
    /// Print the closed-form parameter count for a configuration.
    Params(SpecFlags),
    /// Run an ablation grid and print measured vs reference tables.
    Ablate(ablate::AblateArgs),
}

/// Architecture and training flags shared by train/params/ablate.
#[derive(Args, Debug, Clone, Default)]
pub struct SpecFlags {
    /// Flat key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset kind: text8 | audio.
    #[arg(long)]
    dataset: Option<String>,
    /// Input data path (text8 bytes, raw u8 samples, or 8-bit mono 8 kHz WAV).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Audio container: raw | wav.
    #[arg(long)]
    audio_format: Option<String>,
    /// Decoder block count.
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads per block.
    #[arg(long)]
    heads: Option<usize>,
    /// Embedding dimension E.
    #[arg(long)]
    embed: Option<usize>,
    /// Feed-forward hidden size (default: 512 at E=128, else 2*E).
    #[arg(long)]
    ff: Option<usize>,
    /// Context window in tokens.
    #[arg(long)]
    context: Option<usize>,
    /// Conv module variant: none | small | large.
    #[arg(long)]
    conv: Option<String>,
    /// Conv module placement: skip_last_gap | all_gaps.
    #[arg(long)]
    conv_placement: Option<String>,
    /// Dropout rate for feed-forward hidden activations.
    #[arg(long)]
    dropout: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (windows per optimizer step).
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for init, shuffling, and dropout streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Piecewise-constant schedule, e.g. `0:3e-4,10:1e-4,20:1e-5`.
    #[arg(long)]
    lr_schedule: Option<String>,
    /// Global gradient-norm clip (off when absent).
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Train/val/test split, e.g. `0.9,0.05,0.05`.
    #[arg(long)]
    split_ratios: Option<String>,
    /// Use only the first N tokens of the stream.
    #[arg(long)]
    limit: Option<usize>,
    /// Record wall times as 0 so same-seed runs produce identical files.
    #[arg(long)]
    deterministic: bool,
    /// Output directory (default: $CONFORMER_LM_OUT/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input data path.
    #[arg(long)]
    data: PathBuf,
    /// Which split of the data to evaluate: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Audio container: raw | wav.
    #[arg(long, default_value = "raw")]
    audio_format: String,
    /// Train/val/test split ratios.
    #[arg(long)]
    split_ratios: Option<String>,
    /// Use only the first N tokens of the stream.
    #[arg(long)]
    limit: Option<usize>,
    /// Directory receiving the appended metrics.csv (default: alongside
    /// the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text prompt (text8 vocabulary).
    #[arg(long)]
    prompt: Option<String>,
    /// File whose bytes form the prompt (required for audio models).
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Tokens to generate.
    #[arg(long, default_value_t = 128)]
    steps: usize,
    /// Softmax temperature; 0 is greedy argmax.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (text prints to stdout when absent; audio requires it).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Params(args) => cmd_params(args),
        Cmd::Ablate(args) => ablate::cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<UsageError>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<conformer::Error>(),
        Some(conformer::Error::Config(_)) | Some(conformer::Error::Usage(_))
    )
}

/// Merge defaults <- config file <- flags into a resolved RunSpec.
pub fn resolve_spec(
    flags: &SpecFlags,
    default_name: &str,
    need_data: bool,
    need_out: bool,
) -> Result<RunSpec> {
    resolve_spec_inner(flags, default_name, need_data, need_out, true)
}

fn resolve_spec_inner(
    flags: &SpecFlags,
    default_name: &str,
    need_data: bool,
    need_out: bool,
    check_model: bool,
) -> Result<RunSpec> {
    let mut file: Vec<(String, String)> = Vec::new();
    if let Some(path) = &flags.config {
        file = read_config_file(path).map_err(|e| usage(e.to_string()))?;
    }
    let get = |key: &str| -> Option<String> {
        file.iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
    };
    let known = [
        "dataset", "data", "audio-format", "layers", "heads", "embed", "ff", "context", "conv",
        "conv-placement", "dropout", "epochs", "batch", "seed", "lr-schedule", "grad-clip",
        "split-ratios", "limit", "deterministic", "out",
    ];
    for (k, _) in &file {
        if !known.contains(&k.as_str()) {
            return Err(usage(format!("unknown config key `{}`", k)));
        }
    }
    let parse_int = |s: String, what: &str| -> Result<usize> {
        s.parse().map_err(|_| usage(format!("bad {}: `{}`", what, s)))
    };

    let dataset = match flags.dataset.clone().or_else(|| get("dataset")) {
        Some(s) => match s.as_str() {
            "text8" => StreamSource::Text8,
            "audio" => StreamSource::AudioU8,
            other => return Err(usage(format!("unknown dataset `{}` (text8|audio)", other))),
        },
        None => StreamSource::Text8,
    };
    let data = flags
        .data
        .clone()
        .or_else(|| get("data").map(PathBuf::from));
    if need_data && data.is_none() {
        return Err(usage("--data is required"));
    }
    let audio_format = match flags
        .audio_format
        .clone()
        .or_else(|| get("audio-format"))
        .as_deref()
    {
        None | Some("raw") => AudioFormat::Raw,
        Some("wav") => AudioFormat::Wav,
        Some(other) => return Err(usage(format!("unknown audio format `{}` (raw|wav)", other))),
    };
    let layers = match flags.layers {
        Some(v) => v,
        None => get("layers").map(|s| parse_int(s, "layers")).transpose()?.unwrap_or(6),
    };
    // The published baseline says ten heads, but ten does not divide
    // E=128 under per-head slices of [E,E] projections; eight is the
    // nearest workable default. `params --heads 10` still reports the
    // ten-head parameter count (it is head-count independent).
    let heads = match flags.heads {
        Some(v) => v,
        None => get("heads").map(|s| parse_int(s, "heads")).transpose()?.unwrap_or(8),
    };
    let embed = match flags.embed {
        Some(v) => v,
        None => get("embed").map(|s| parse_int(s, "embed")).transpose()?.unwrap_or(128),
    };
    let ff = match flags.ff {
        Some(v) => v,
        None => match get("ff").map(|s| parse_int(s, "ff")).transpose()? {
            Some(v) => v,
            None if embed == 128 => 512,
            None => 2 * embed,
        },
    };
    let context = match flags.context {
        Some(v) => v,
        None => get("context").map(|s| parse_int(s, "context")).transpose()?.unwrap_or(256),
    };
    let conv = match flags.conv.clone().or_else(|| get("conv")) {
        Some(s) => ConvChoice::parse(&s).map_err(|e| usage(e.to_string()))?,
        None => ConvChoice::None,
    };
    let conv_placement = match flags.conv_placement.clone().or_else(|| get("conv-placement")) {
        Some(s) => ConvPlacement::parse(&s).map_err(|e| usage(e.to_string()))?,
        None => ConvPlacement::SkipLastGap,
    };
    let dropout = match flags.dropout {
        Some(v) => v,
        None => match get("dropout") {
            Some(s) => s
                .parse()
                .map_err(|_| usage(format!("bad dropout `{}`", s)))?,
            None => 0.1,
        },
    };
    let epochs = match flags.epochs {
        Some(v) => v,
        None => get("epochs").map(|s| parse_int(s, "epochs")).transpose()?.unwrap_or(30),
    };
    let batch = match flags.batch {
        Some(v) => v,
        None => get("batch").map(|s| parse_int(s, "batch")).transpose()?.unwrap_or(32),
    };
    let seed = match flags.seed {
        Some(v) => v,
        None => match get("seed") {
            Some(s) => s.parse().map_err(|_| usage(format!("bad seed `{}`", s)))?,
            None => 0,
        },
    };
    let lr_schedule = match flags.lr_schedule.clone().or_else(|| get("lr-schedule")) {
        Some(s) => parse_lr_schedule(&s).map_err(|e| usage(e.to_string()))?,
        None => default_lr_phases(),
    };
    let grad_clip = match flags.grad_clip {
        Some(v) => Some(v),
        None => get("grad-clip")
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| usage(format!("bad grad-clip `{}`", s)))
            })
            .transpose()?,
    };
    let split_ratios = match flags.split_ratios.clone().or_else(|| get("split-ratios")) {
        Some(s) => parse_ratios(&s).map_err(|e| usage(e.to_string()))?,
        None => match dataset {
            StreamSource::Text8 => (0.9, 0.05, 0.05),
            StreamSource::AudioU8 => (0.8, 0.1, 0.1),
        },
    };
    let limit = match flags.limit {
        Some(v) => Some(v),
        None => get("limit").map(|s| parse_int(s, "limit")).transpose()?,
    };
    let deterministic =
        flags.deterministic || get("deterministic").map(|s| s == "true").unwrap_or(false);
    let out = match flags.out.clone().or_else(|| get("out").map(PathBuf::from)) {
        Some(p) => p,
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => Path::new(&root).join(format!("{}-seed{}", default_name, seed)),
            None if need_out => {
                return Err(usage(format!("--out is required (or set {})", OUT_ENV)))
            }
            None => PathBuf::new(),
        },
    };

    let spec = RunSpec {
        dataset,
        data: data.unwrap_or_default(),
        audio_format,
        layers,
        heads,
        embed,
        ff,
        context,
        conv,
        conv_placement,
        dropout,
        epochs,
        batch,
        seed,
        lr_schedule,
        grad_clip,
        split_ratios,
        limit,
        deterministic,
        out,
    };
    // Surface config invariants (e.g. embed % heads) as usage errors now.
    if check_model {
        spec.model_config().validate()?;
    }
    Ok(spec)
}

pub fn load_stream(spec: &RunSpec) -> Result<TokenStream> {
    let stream = match spec.dataset {
        StreamSource::Text8 => load_text8(&spec.data)?,
        StreamSource::AudioU8 => load_audio_u8(&spec.data, spec.audio_format)?,
    };
    Ok(match spec.limit {
        Some(n) => stream.truncated(n),
        None => stream,
    })
}

pub fn run_training(spec: &RunSpec) -> Result<(conformer::train::TrainOutput, TokenStream)> {
    spec.write_echo(&spec.out)?;
    let stream = load_stream(spec)?;
    let (train_split, val_split, test_split) = split_stream(&stream, spec.split_ratios)?;
    let streams = Streams {
        train: train_split,
        val: Some(val_split),
    };
    let output = train(&spec.model_config(), &spec.train_config(), &streams, Some(&spec.out))?;
    Ok((output, test_split))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let spec = resolve_spec(&args.spec, "train", true, true)?;
    eprint!("runspec:\n{}", spec.echo());
    let (output, _test) = run_training(&spec)?;
    if let Some(last) = output.history.last() {
        println!("{}", MetricsRecord::CSV_HEADER);
        println!("{}", last.csv_row());
    }
    eprintln!(
        "wrote metrics.csv, runspec.txt, best.cflm, final.cflm to {}",
        spec.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let source = if ck.config.vocab == conformer::data::AUDIO_VOCAB {
        StreamSource::AudioU8
    } else {
        StreamSource::Text8
    };
    let audio_format = match args.audio_format.as_str() {
        "raw" => AudioFormat::Raw,
        "wav" => AudioFormat::Wav,
        other => return Err(usage(format!("unknown audio format `{}`", other))),
    };
    let stream = match source {
        StreamSource::Text8 => load_text8(&args.data)?,
        StreamSource::AudioU8 => load_audio_u8(&args.data, audio_format)?,
    };
    let stream = match args.limit {
        Some(n) => stream.truncated(n),
        None => stream,
    };
    let ratios = match &args.split_ratios {
        Some(s) => parse_ratios(s).map_err(|e| usage(e.to_string()))?,
        None => match source {
            StreamSource::Text8 => (0.9, 0.05, 0.05),
            StreamSource::AudioU8 => (0.8, 0.1, 0.1),
        },
    };
    let (train_split, val_split, test_split) = split_stream(&stream, ratios)?;
    let (split, part) = match args.split.as_str() {
        "train" => (Split::Train, train_split),
        "val" => (Split::Val, val_split),
        "test" => (Split::Test, test_split),
        other => return Err(usage(format!("unknown split `{}` (train|val|test)", other))),
    };
    let mut record = evaluate(&ck.params, &ck.config, &part)?;
    record.split = split;
    record.epoch = ck.trained_epochs;
    println!("{}", MetricsRecord::CSV_HEADER);
    println!("{}", record.csv_row());
    let out_dir = args
        .out
        .clone()
        .or_else(|| args.checkpoint.parent().map(Path::to_path_buf))
        .ok_or_else(|| anyhow!("cannot determine output directory"))?;
    std::fs::create_dir_all(&out_dir)?;
    append_metrics_csv(&out_dir.join("metrics.csv"), &[record])?;
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let is_audio = ck.config.vocab == conformer::data::AUDIO_VOCAB;
    let text_prompt_ids = |bytes: &[u8]| -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(bytes.len());
        for (offset, &b) in bytes.iter().enumerate() {
            match text8_byte_to_id(b) {
                Some(id) => ids.push(id as u32),
                None => bail!(conformer::Error::InvalidByte { byte: b, offset }),
            }
        }
        Ok(ids)
    };
    let prompt: Vec<u32> = match (&args.prompt, &args.prompt_file) {
        (Some(_), Some(_)) => {
            return Err(usage("give either --prompt or --prompt-file, not both"))
        }
        (Some(text), None) => {
            if is_audio {
                return Err(usage("audio models need --prompt-file (raw bytes)"));
            }
            text_prompt_ids(text.as_bytes())?
        }
        (None, Some(path)) => {
            let bytes = std::fs::read(path).context("reading prompt file")?;
            if is_audio {
                bytes.into_iter().map(|b| b as u32).collect()
            } else {
                text_prompt_ids(&bytes)?
            }
        }
        (None, None) => return Err(usage("a prompt is required (--prompt or --prompt-file)")),
    };
    let tokens = generate(
        &ck.params,
        &ck.config,
        &prompt,
        args.steps,
        args.temperature,
        args.seed,
    )?;
    if is_audio {
        let out = args
            .out
            .ok_or_else(|| usage("audio generation requires --out FILE"))?;
        let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
        std::fs::write(&out, bytes)?;
        eprintln!("wrote {} samples to {}", tokens.len(), out.display());
    } else {
        let text: String = tokens
            .iter()
            .map(|&t| text8_id_to_byte(t as u8) as char)
            .collect();
        match args.out {
            Some(path) => std::fs::write(&path, text)?,
            None => println!("{}", text),
        }
    }
    Ok(())
}

fn cmd_params(flags: SpecFlags) -> Result<()> {
    // Counting is a closed form; it stays available even for configs that
    // training would reject (the published ten-head baseline).
    let spec = resolve_spec_inner(&flags, "params", false, false, false)?;
    let config = spec.model_config();
    if config.validate().is_err() {
        eprintln!(
            "note: this configuration is not trainable ({} % {} != 0); counts are still exact",
            config.embed_dim, config.num_heads
        );
    }
    let count = count_parameters(&config);
    println!(
        "configuration: layers={} heads={} embed={} ff={} context={} vocab={} conv={} placement={}",
        config.num_layers,
        config.num_heads,
        config.embed_dim,
        config.ff_hidden,
        config.context,
        config.vocab,
        spec.conv.as_str(),
        config.conv_placement.as_str()
    );
    println!("{}", count);
    Ok(())
}
