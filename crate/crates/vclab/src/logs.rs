//! Per-iteration CSV training log.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vclab_core::losses::LossReport;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    /// 1-based iteration within the stage.
    pub iteration: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub cls_c: f64,
    pub cls_g: f64,
    pub cyc: f64,
    pub id: f64,
    /// Per-frame prior loss; empty in stage 1.
    pub asr: Option<f64>,
    pub i_g: f64,
    pub i_d: f64,
    pub i_c: f64,
}

impl LogRow {
    pub fn new(iteration: u64, r: &LossReport) -> Self {
        LogRow {
            stage: r.stage,
            iteration,
            adv_d: r.parts.adv_d,
            adv_g: r.parts.adv_g,
            cls_c: r.parts.cls_c,
            cls_g: r.parts.cls_g,
            cyc: r.parts.cyc,
            id: r.parts.id,
            asr: r.parts.asr.map(|a| a.normalized()),
            i_g: r.i_g,
            i_d: r.i_d,
            i_c: r.i_c,
        }
    }
}

pub struct TrainLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let writer = csv::Writer::from_path(path).map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
        Ok(TrainLog { path: path.to_path_buf(), writer })
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row).map_err(|source| Error::Csv { path: self.path.clone(), source })
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| Error::Csv { path: path.to_path_buf(), source })?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|source| Error::Csv { path: path.to_path_buf(), source })
}
