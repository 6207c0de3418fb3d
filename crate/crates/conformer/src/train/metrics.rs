use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-epoch, per-split evaluation record.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub nll_nats: f64,
    pub bits_per_token: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn new(epoch: usize, split: Split, nll_nats: f64, accuracy: f64, lr: f64, wall_seconds: f64) -> MetricsRecord {
        MetricsRecord {
            epoch,
            split,
            nll_nats,
            bits_per_token: nll_nats / std::f64::consts::LN_2,
            accuracy,
            lr,
            wall_seconds,
        }
    }

    pub const CSV_HEADER: &'static str = "epoch,split,nll_nats,bits_per_token,accuracy,lr,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.split, self.nll_nats, self.bits_per_token, self.accuracy, self.lr, self.wall_seconds
        )
    }
}

/// Append records to `path`, writing the header first when the file does
/// not exist yet.
pub fn append_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let exists = path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        writeln!(f, "{}", MetricsRecord::CSV_HEADER)?;
    }
    for r in records {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}
