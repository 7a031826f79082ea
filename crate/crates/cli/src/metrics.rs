use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const METRICS_HEADER: &str = "iteration,train_loss,val_loss,val_accuracy,test_accuracy,wall_ms";

/// One row of the metrics stream. `test_accuracy` is measured at the
/// parameters with the lowest validation loss seen so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.iteration, self.train_loss, self.val_loss, self.val_accuracy, self.test_accuracy, self.wall_ms)
    }

    fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("expected 6 fields, found {}", f.len());
        }
        Ok(Self {
            iteration: f[0].parse()?,
            train_loss: f[1].parse()?,
            val_loss: f[2].parse()?,
            val_accuracy: f[3].parse()?,
            test_accuracy: f[4].parse()?,
            wall_ms: f[5].parse()?,
        })
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{}", r.csv_row()).expect("writing to a String cannot fail");
    }
    s
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, to_csv(records)).with_context(|| format!("writing {}", path.display()))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail!("{} does not start with the metrics header", path.display());
    }
    lines.enumerate().map(|(k, l)| MetricsRecord::parse(l).with_context(|| format!("{}:{}", path.display(), k + 2))).collect()
}
