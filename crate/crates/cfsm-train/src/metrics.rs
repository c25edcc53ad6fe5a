//! JSON-lines metrics logging, one object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, TrainError};

pub struct MetricsLogger {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLogger {
    pub fn create(path: &Path) -> Result<MetricsLogger> {
        let file = File::create(path).map_err(|e| TrainError::io(path, e))?;
        Ok(MetricsLogger {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    /// Appends one record; flushed immediately so logs survive aborts.
    pub fn log(&mut self, record: &serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(record).expect("metrics record serializes");
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| TrainError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads a JSONL file back into values (test/analysis helper).
pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let file = File::open(path).map_err(|e| TrainError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| TrainError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| TrainError::InvalidConfig(format!("bad metrics line: {e}")))?;
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn log_lines_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut logger = MetricsLogger::create(&path).unwrap();
        for step in 0..5 {
            logger.log(&json!({"step": step, "loss": step as f64 * 0.5})).unwrap();
        }
        drop(logger);
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[3]["step"], 3);
        assert_eq!(back[3]["loss"], 1.5);
    }
}
