//! Resolved run configuration: defaults, then config file, then flags.
//!
//! The echo written to the output directory (`runspec.txt`) uses the same
//! flat `key=value` format the `--config` flag reads, so a run can be
//! reproduced from its own echo.

use anyhow::{anyhow, bail, Result};
use conformer::data::{AudioFormat, StreamSource};
use conformer::model::{ConvBlockSpec, ConvPlacement, ModelConfig};
use conformer::train::{LrPhase, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvChoice {
    None,
    Small,
    Large,
}

impl ConvChoice {
    pub fn parse(s: &str) -> Result<ConvChoice> {
        match s {
            "none" => Ok(ConvChoice::None),
            "small" => Ok(ConvChoice::Small),
            "large" => Ok(ConvChoice::Large),
            other => bail!("unknown conv choice `{}` (expected none|small|large)", other),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ConvChoice::None => "none",
            ConvChoice::Small => "small",
            ConvChoice::Large => "large",
        }
    }

    pub fn spec(&self, embed: usize) -> Option<ConvBlockSpec> {
        match self {
            ConvChoice::None => None,
            ConvChoice::Small => Some(ConvBlockSpec::small(embed)),
            ConvChoice::Large => Some(ConvBlockSpec::large(embed)),
        }
    }
}

/// Everything a run needs, fully resolved before any compute.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub dataset: StreamSource,
    pub data: PathBuf,
    pub audio_format: AudioFormat,
    pub layers: usize,
    pub heads: usize,
    pub embed: usize,
    pub ff: usize,
    pub context: usize,
    pub conv: ConvChoice,
    pub conv_placement: ConvPlacement,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr_schedule: Vec<LrPhase>,
    pub grad_clip: Option<f64>,
    pub split_ratios: (f64, f64, f64),
    pub limit: Option<usize>,
    pub deterministic: bool,
    pub out: PathBuf,
}

pub fn parse_lr_schedule(s: &str) -> Result<Vec<LrPhase>> {
    let mut phases = Vec::new();
    for part in s.split(',') {
        let (epoch, lr) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("bad lr phase `{}` (expected EPOCH:LR)", part))?;
        phases.push(LrPhase {
            start_epoch: epoch.parse().map_err(|_| anyhow!("bad epoch `{}`", epoch))?,
            lr: lr.parse().map_err(|_| anyhow!("bad lr `{}`", lr))?,
        });
    }
    Ok(phases)
}

pub fn lr_schedule_to_string(phases: &[LrPhase]) -> String {
    phases
        .iter()
        .map(|p| format!("{}:{}", p.start_epoch, p.lr))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        bail!("split ratios must be three comma-separated numbers");
    }
    let p: Vec<f64> = parts
        .iter()
        .map(|v| v.parse().map_err(|_| anyhow!("bad ratio `{}`", v)))
        .collect::<Result<_>>()?;
    Ok((p[0], p[1], p[2]))
}

impl RunSpec {
    pub fn model_config(&self) -> ModelConfig {
        let vocab = match self.dataset {
            StreamSource::Text8 => conformer::data::TEXT8_VOCAB,
            StreamSource::AudioU8 => conformer::data::AUDIO_VOCAB,
        };
        ModelConfig {
            num_layers: self.layers,
            num_heads: self.heads,
            embed_dim: self.embed,
            ff_hidden: self.ff,
            context: self.context,
            vocab,
            conv_spec: self.conv.spec(self.embed),
            conv_placement: self.conv_placement,
            dropout_rate: self.dropout,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_phases: self.lr_schedule.clone(),
            batch_size: self.batch,
            grad_clip: self.grad_clip,
            seed: self.seed,
            deterministic: self.deterministic,
            ..TrainConfig::default()
        }
    }

    /// Flat key=value text; `--config` on this text reproduces the run.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset={}",
            match self.dataset {
                StreamSource::Text8 => "text8",
                StreamSource::AudioU8 => "audio",
            }
        );
        let _ = writeln!(s, "data={}", self.data.display());
        let _ = writeln!(
            s,
            "audio-format={}",
            match self.audio_format {
                AudioFormat::Raw => "raw",
                AudioFormat::Wav => "wav",
            }
        );
        let _ = writeln!(s, "layers={}", self.layers);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "embed={}", self.embed);
        let _ = writeln!(s, "ff={}", self.ff);
        let _ = writeln!(s, "context={}", self.context);
        let _ = writeln!(s, "conv={}", self.conv.as_str());
        let _ = writeln!(s, "conv-placement={}", self.conv_placement.as_str());
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "lr-schedule={}", lr_schedule_to_string(&self.lr_schedule));
        if let Some(c) = self.grad_clip {
            let _ = writeln!(s, "grad-clip={}", c);
        }
        let _ = writeln!(
            s,
            "split-ratios={},{},{}",
            self.split_ratios.0, self.split_ratios.1, self.split_ratios.2
        );
        if let Some(l) = self.limit {
            let _ = writeln!(s, "limit={}", l);
        }
        let _ = writeln!(s, "deterministic={}", self.deterministic);
        let _ = writeln!(s, "out={}", self.out.display());
        s
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("runspec.txt"), self.echo())?;
        Ok(())
    }
}

/// Key=value pairs from a config file; later flags override these.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow!("cannot read config {}: {}", path.display(), e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {} is not key=value: `{}`", lineno + 1, line))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}
