//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CFLM"
//! version u32      currently 1
//! config  u32 byte length, then UTF-8 `key=value` lines (one per line):
//!         layers, heads, embed, ff_hidden, context, vocab,
//!         conv_spec (`none` or `KxF,KxF,...`), conv_placement
//!         (`all_gaps` | `skip_last_gap`), dropout, seed, trained_epochs
//! tensors until EOF, each:
//!         u32 name length, name bytes,
//!         u32 rank, u64 extent per axis,
//!         f32 elements (row-major, little-endian bit patterns)
//! ```
//!
//! Tensor bytes are the exact `f32` bit patterns, so a save/load
//! round-trip is bit-exact.

use crate::error::{Error, Result};
use crate::model::config::{ConvBlockSpec, ConvPlacement, ModelConfig};
use crate::model::params::ModelParams;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use tensorcore::Tensor;

pub const MAGIC: &[u8; 4] = b"CFLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub trained_epochs: usize,
}

fn config_text(config: &ModelConfig, trained_epochs: usize) -> String {
    let conv = config
        .conv_spec
        .as_ref()
        .map(|s| s.to_compact())
        .unwrap_or_else(|| "none".into());
    format!(
        "layers={}\nheads={}\nembed={}\nff_hidden={}\ncontext={}\nvocab={}\nconv_spec={}\nconv_placement={}\ndropout={}\nseed={}\ntrained_epochs={}\n",
        config.num_layers,
        config.num_heads,
        config.embed_dim,
        config.ff_hidden,
        config.context,
        config.vocab,
        conv,
        config.conv_placement.as_str(),
        config.dropout_rate,
        config.seed,
        trained_epochs,
    )
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, usize)> {
    let get = |key: &str| -> Result<String> {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{}=", key)))
            .map(str::to_string)
            .ok_or_else(|| Error::Checkpoint(format!("config text missing key `{}`", key)))
    };
    let int = |s: String, key: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Checkpoint(format!("bad integer for `{}`: {}", key, s)))
    };
    let conv_spec = match get("conv_spec")?.as_str() {
        "none" => None,
        other => Some(ConvBlockSpec::from_compact(other)?),
    };
    let config = ModelConfig {
        num_layers: int(get("layers")?, "layers")?,
        num_heads: int(get("heads")?, "heads")?,
        embed_dim: int(get("embed")?, "embed")?,
        ff_hidden: int(get("ff_hidden")?, "ff_hidden")?,
        context: int(get("context")?, "context")?,
        vocab: int(get("vocab")?, "vocab")?,
        conv_spec,
        conv_placement: ConvPlacement::parse(&get("conv_placement")?)?,
        dropout_rate: get("dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad dropout value".into()))?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad seed value".into()))?,
    };
    let trained = int(get("trained_epochs")?, "trained_epochs")?;
    Ok((config, trained))
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams<f32>,
    trained_epochs: usize,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let text = config_text(config, trained_epochs);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for (name, tensor) in params.named_tensors() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("unexpected end of {}", what)))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.exact(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.exact(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    /// Returns None at a clean EOF boundary.
    fn u32_or_eof(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::Checkpoint("unexpected end of tensor data".into()));
            }
            filled += n;
        }
        Ok(Some(u32::from_le_bytes(buf)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let magic = r.exact(4, "header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected \"CFLM\", got {:?}",
            &magic[..]
        )));
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {})",
            version, FORMAT_VERSION
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.exact(config_len, "config text")?;
    let text = String::from_utf8(config_bytes)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let (config, trained_epochs) = parse_config_text(&text)?;
    config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Checkpoint(format!("invalid stored config: {}", msg)),
        other => other,
    })?;

    // Start from a zeroed structure and fill every tensor by name.
    let mut params: ModelParams<f32> = ModelParams::init(&config)?;
    let expected: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut seen: HashSet<String> = HashSet::new();
    while let Some(name_len) = r.u32_or_eof()? {
        let name = String::from_utf8(r.exact(name_len as usize, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor extents")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.exact(numel * 4, "tensor data")?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {}", name, e)))?;
        params.set_by_name(&name, tensor)?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", name)));
        }
    }
    for name in &expected {
        if !seen.contains(name) {
            return Err(Error::Checkpoint(format!("missing tensor `{}`", name)));
        }
    }
    Ok(Checkpoint {
        config,
        params,
        trained_epochs,
    })
}
