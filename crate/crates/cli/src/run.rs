//! Run directories and JSON-lines metrics.
//!
//! `metrics.jsonl` holds only values that are a function of the config and
//! seed, so repeated runs produce identical bytes. Wall-clock times go to
//! `timings.jsonl`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord<'a> {
    pub run_id: &'a str,
    pub phase: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub metric: &'a str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TimingRecord<'a> {
    run_id: &'a str,
    phase: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    wall_ms: u64,
}

/// First 16 hex digits of SHA-256 over the command name and the effective
/// config text (which includes the seed).
pub fn run_id(command: &str, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\n");
    h.update(cfg.to_text().as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

pub struct Run {
    pub id: String,
    pub dir: PathBuf,
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

impl Run {
    /// Creates `<root>/<run_id>/`, writes `config.txt` and truncates both
    /// metrics files.
    pub fn create(root: impl AsRef<Path>, command: &str, cfg: &RunConfig) -> io::Result<Self> {
        let id = run_id(command, cfg);
        let dir = root.as_ref().join(&id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        Ok(Self {
            metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
            timings: BufWriter::new(File::create(dir.join("timings.jsonl"))?),
            id,
            dir,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn metric(&mut self, phase: &str, epoch: Option<usize>, metric: &str, value: f64) -> io::Result<()> {
        let rec = MetricsRecord { run_id: &self.id, phase, epoch, metric, value };
        serde_json::to_writer(&mut self.metrics, &rec)?;
        self.metrics.write_all(b"\n")
    }

    pub fn timing(&mut self, phase: &str, epoch: Option<usize>, wall_ms: u64) -> io::Result<()> {
        let rec = TimingRecord { run_id: &self.id, phase, epoch, wall_ms };
        serde_json::to_writer(&mut self.timings, &rec)?;
        self.timings.write_all(b"\n")
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> io::Result<PathBuf> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.metrics.flush()?;
        self.timings.flush()
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
