//! NDJSON dataset files: one header line followed by one segment per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatagenError;

pub const DATASET_SCHEMA: &str = "mdk-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub seed: u64,
    pub plant_config_hash: String,
    pub episodes_requested: usize,
    pub episodes_discarded: Vec<u64>,
}

/// A fixed-length stretch of one episode, SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub episode: u64,
    pub segment: usize,
    pub kappa: f64,
    pub dt: f64,
    pub states: Vec<[f64; 6]>,
    pub inputs: Vec<[f64; 4]>,
}

impl Segment {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub segments: Vec<Segment>,
}

impl Dataset {
    /// Distinct episode ids in ascending order.
    pub fn episode_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.segments.iter().map(|s| s.episode).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io { path: path.display().to_string(), source }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatagenError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let json_err = |e: serde_json::Error| DatagenError::Format { path: path.display().to_string(), line: 0, msg: e.to_string() };
    serde_json::to_writer(&mut w, &ds.header).map_err(json_err)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    for seg in &ds.segments {
        serde_json::to_writer(&mut w, seg).map_err(json_err)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatagenError> {
    let file = File::open(path).map_err(io_err(path))?;
    let fmt = |line: usize, msg: String| DatagenError::Format { path: path.display().to_string(), line, msg };
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?.map_err(io_err(path))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| fmt(1, e.to_string()))?;
    if header.schema != DATASET_SCHEMA {
        return Err(fmt(1, format!("unsupported schema `{}`", header.schema)));
    }
    let mut segments = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: Segment = serde_json::from_str(&line).map_err(|e| fmt(i + 2, e.to_string()))?;
        if seg.states.len() != seg.inputs.len() + 1 || seg.inputs.is_empty() {
            return Err(fmt(i + 2, format!("{} states for {} inputs", seg.states.len(), seg.inputs.len())));
        }
        segments.push(seg);
    }
    Ok(Dataset { header, segments })
}
