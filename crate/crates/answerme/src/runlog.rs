//! Run directories: lock file, resolved config, loss log and summary.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use answerme_core::mixture::TrainRunRecord;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::formats::write_once;

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".answerme.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(AppError::Locked {
                path: dir.to_path_buf(),
            }),
            Err(e) => Err(AppError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Stores the resolved config and its hash next to a run's outputs.
pub fn write_resolved_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write_once(&dir.join("config.resolved.toml"), config.to_toml().as_bytes())?;
    write_once(&dir.join("config.hash"), format!("{}\n", config.hash()).as_bytes())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LossLine {
    pub step: u64,
    pub loss: f64,
}

/// Line-delimited loss log, one JSON object per step. Appends, so a
/// resumed run extends the log of the run it continues.
pub struct LossLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AppError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn push(&mut self, step: u64, loss: f64) -> Result<()> {
        let line = serde_json::to_string(&LossLine { step, loss }).expect("loss line serializes");
        writeln!(self.out, "{line}").map_err(|e| AppError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| AppError::io(&self.path, e))
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossLine>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| AppError::format(path, e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub config_hash: String,
    pub start_step: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoints: Vec<String>,
    pub per_task_counts: Vec<(String, u64)>,
    pub wall_clock_secs: f64,
}

impl RunSummary {
    pub fn new(command: &str, config_hash: &str, start_step: u64, record: &TrainRunRecord, secs: f64) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash.into(),
            start_step,
            steps: record.losses.last().map_or(start_step, |l| l.0),
            final_loss: record.losses.last().map(|l| l.1),
            checkpoints: record.checkpoints.iter().map(|s| format!("step-{s}.ckpt")).collect(),
            per_task_counts: record.per_task_counts.clone(),
            wall_clock_secs: secs,
        }
    }
}
