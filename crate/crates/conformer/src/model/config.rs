use crate::error::{Error, Result};

/// One causal convolution layer inside a sandwiched module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub kernel_width: usize,
    pub filter_count: usize,
}

/// Ordered stack of causal conv layers forming one module placed in a gap
/// between decoder blocks. The final layer's filter count must equal the
/// embedding dimension so the module's skip connection type-checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub layers: Vec<ConvLayerSpec>,
}

impl ConvBlockSpec {
    /// Small variant: kernel widths 3 and 7, E filters each.
    pub fn small(embed_dim: usize) -> ConvBlockSpec {
        ConvBlockSpec {
            layers: vec![
                ConvLayerSpec { kernel_width: 3, filter_count: embed_dim },
                ConvLayerSpec { kernel_width: 7, filter_count: embed_dim },
            ],
        }
    }

    /// Large variant: kernel widths {2, 3, 5} with {2E, 2E, E} filters.
    pub fn large(embed_dim: usize) -> ConvBlockSpec {
        ConvBlockSpec {
            layers: vec![
                ConvLayerSpec { kernel_width: 2, filter_count: 2 * embed_dim },
                ConvLayerSpec { kernel_width: 3, filter_count: 2 * embed_dim },
                ConvLayerSpec { kernel_width: 5, filter_count: embed_dim },
            ],
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("conv spec must have at least one layer".into()));
        }
        for l in &self.layers {
            if l.kernel_width == 0 || l.filter_count == 0 {
                return Err(Error::Config(
                    "conv kernel widths and filter counts must be >= 1".into(),
                ));
            }
        }
        let last = self.layers.last().unwrap();
        if last.filter_count != embed_dim {
            return Err(Error::Config(format!(
                "conv spec's final filter count {} must equal embed dim {} for the skip connection",
                last.filter_count, embed_dim
            )));
        }
        Ok(())
    }

    /// Compact text form, e.g. `3x128,7x128`.
    pub fn to_compact(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}x{}", l.kernel_width, l.filter_count))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_compact(s: &str) -> Result<ConvBlockSpec> {
        let mut layers = Vec::new();
        for part in s.split(',') {
            let (k, f) = part
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("bad conv layer `{}`", part)))?;
            layers.push(ConvLayerSpec {
                kernel_width: k
                    .parse()
                    .map_err(|_| Error::Config(format!("bad kernel width `{}`", k)))?,
                filter_count: f
                    .parse()
                    .map_err(|_| Error::Config(format!("bad filter count `{}`", f)))?,
            });
        }
        Ok(ConvBlockSpec { layers })
    }
}

/// Where conv modules sit among the `L-1` gaps between decoder blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPlacement {
    /// A module in every gap: after blocks `0..=L-2` (`L-1` modules).
    AllGaps,
    /// Leave the gap before the final block empty: after blocks
    /// `0..=L-3` (`L-2` modules). The default.
    #[default]
    SkipLastGap,
}

impl ConvPlacement {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConvPlacement::AllGaps => "all_gaps",
            ConvPlacement::SkipLastGap => "skip_last_gap",
        }
    }

    pub fn parse(s: &str) -> Result<ConvPlacement> {
        match s {
            "all_gaps" => Ok(ConvPlacement::AllGaps),
            "skip_last_gap" => Ok(ConvPlacement::SkipLastGap),
            other => Err(Error::Config(format!(
                "unknown conv placement `{}` (expected all_gaps or skip_last_gap)",
                other
            ))),
        }
    }
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub ff_hidden: usize,
    pub context: usize,
    pub vocab: usize,
    pub conv_spec: Option<ConvBlockSpec>,
    pub conv_placement: ConvPlacement,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Feed-forward hidden size defaults to twice the embedding dimension.
    pub fn new(num_layers: usize, num_heads: usize, embed_dim: usize, vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers,
            num_heads,
            embed_dim,
            ff_hidden: 2 * embed_dim,
            context: 256,
            vocab,
            conv_spec: None,
            conv_placement: ConvPlacement::default(),
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    /// The baseline architecture: 6 layers, 10 heads, E=128, hidden 512,
    /// context 256.
    pub fn baseline(vocab: usize) -> ModelConfig {
        let mut c = ModelConfig::new(6, 10, 128, vocab);
        c.ff_hidden = 512;
        c
    }

    pub fn with_conv(mut self, spec: ConvBlockSpec) -> ModelConfig {
        self.conv_spec = Some(spec);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Number of conv modules implied by placement (zero when no spec).
    pub fn conv_module_count(&self) -> usize {
        if self.conv_spec.is_none() {
            return 0;
        }
        match self.conv_placement {
            ConvPlacement::AllGaps => self.num_layers.saturating_sub(1),
            ConvPlacement::SkipLastGap => self.num_layers.saturating_sub(2),
        }
    }

    /// True when a conv module follows decoder block `i`.
    pub fn conv_after_block(&self, i: usize) -> bool {
        self.conv_spec.is_some() && i < self.conv_module_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be >= 1".into()));
        }
        if self.num_heads < 1 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.context < 1 {
            return Err(Error::Config("context must be >= 1".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be >= 2".into()));
        }
        if self.ff_hidden < 1 {
            return Err(Error::Config("ff_hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(spec) = &self.conv_spec {
            spec.validate(self.embed_dim)?;
        }
        Ok(())
    }
}
