use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of `metrics.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    pub wall_ms: u64,
}

impl MetricRecord {
    /// The record without its timing, for run-to-run comparisons.
    pub fn timeless(&self) -> MetricRecord {
        MetricRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

type Observer = Box<dyn FnMut(&Event) + Send>;

/// Something a run reports while it progresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "data", rename_all = "lowercase")]
pub enum Event {
    Metric(MetricRecord),
    Note(String),
}

/// Append-only metric stream. Each record is flushed as written so the file
/// can be tail-followed while training runs.
pub struct MetricsSink {
    file: Option<(BufWriter<File>, std::path::PathBuf)>,
    records: Vec<MetricRecord>,
    notes: Vec<String>,
    start: Instant,
    observer: Option<Observer>,
}

impl Default for MetricsSink {
    fn default() -> Self {
        Self::memory()
    }
}

impl MetricsSink {
    /// Keeps records in memory only.
    pub fn memory() -> Self {
        Self {
            file: None,
            records: Vec::new(),
            notes: Vec::new(),
            start: Instant::now(),
            observer: None,
        }
    }

    /// Also appends each record to `path`.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some((BufWriter::new(f), path.to_path_buf())),
            ..Self::memory()
        })
    }

    pub fn with_observer(mut self, f: impl FnMut(&Event) + Send + 'static) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    pub fn emit(&mut self, record: MetricRecord) -> Result<()> {
        if let Some((w, path)) = self.file.as_mut() {
            let line = serde_json::to_string(&record).expect("plain record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(&Event::Metric(record.clone()));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn note(&mut self, message: impl Into<String>) {
        let message = message.into();
        tracing::info!("{message}");
        if let Some(obs) = self.observer.as_mut() {
            obs(&Event::Note(message.clone()));
        }
        self.notes.push(message);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    /// Records of one phase, in emission order.
    pub fn phase(&self, phase: &str) -> Vec<&MetricRecord> {
        self.records.iter().filter(|r| r.phase == phase).collect()
    }
}

/// Reads an ndjson metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ingestion(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trip_omits_absent_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndjson");
        let mut sink = MetricsSink::to_file(&path).unwrap();
        let rec = MetricRecord {
            phase: "pretrain".into(),
            epoch: 0,
            step: 1,
            loss: 0.5,
            lr: 1e-4,
            top1: None,
            top5: None,
            wall_ms: 3,
        };
        sink.emit(rec.clone()).unwrap();
        sink.emit(MetricRecord {
            top1: Some(0.9),
            top5: Some(1.0),
            ..rec.clone()
        })
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.lines().next().unwrap().contains("top1"));
        let back = read_metrics(&path).unwrap();
        assert_eq!(back[0], rec);
        assert_eq!(back[1].top5, Some(1.0));
    }
}
