//! Per-step metric log: CSV with header `step,nll,latent_kl,mask_kl,total`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{MonetError, Result};
use crate::objective::LossBreakdown;

pub const METRICS_HEADER: &str = "step,nll,latent_kl,mask_kl,total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub nll: f64,
    pub latent_kl: f64,
    pub mask_kl: f64,
    pub total: f64,
}

impl MetricRow {
    pub fn new(step: u64, loss: &LossBreakdown) -> Self {
        Self { step, nll: loss.nll, latent_kl: loss.latent_kl, mask_kl: loss.mask_kl, total: loss.total }
    }

    fn to_line(self) -> String {
        format!("{},{},{},{},{}\n", self.step, self.nll, self.latent_kl, self.mask_kl, self.total)
    }

    fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        let step = it.next()?.trim().parse().ok()?;
        let mut f = || it.next().and_then(|v| v.trim().parse::<f64>().ok());
        let row = Self { step, nll: f()?, latent_kl: f()?, mask_kl: f()?, total: f()? };
        Some(row)
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MonetError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(MonetError::Config(format!("{} is not a metric log (bad header)", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            MetricRow::parse(l)
                .ok_or_else(|| MonetError::Config(format!("{}: malformed row {}: {l:?}", path.display(), i + 2)))
        })
        .collect()
}

/// Append-only writer.
pub struct MetricWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut out = BufWriter::new(File::create(&path).map_err(|e| MonetError::io(&path, e))?);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| MonetError::io(&path, e))?;
        Ok(Self { path, out })
    }

    /// Continues an existing log at `step`, dropping any rows from `step` on.
    pub fn resume(path: impl AsRef<Path>, step: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Self::create(&path);
        }
        let kept: Vec<MetricRow> = read_metrics(&path)?.into_iter().filter(|r| r.step < step).collect();
        let mut w = Self::create(&path)?;
        for r in kept {
            w.write(r)?;
        }
        w.flush()?;
        let out = BufWriter::new(OpenOptions::new().append(true).open(&path).map_err(|e| MonetError::io(&path, e))?);
        Ok(Self { path, out })
    }

    pub fn write(&mut self, row: MetricRow) -> Result<()> {
        self.out.write_all(row.to_line().as_bytes()).map_err(|e| MonetError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| MonetError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for MetricWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
