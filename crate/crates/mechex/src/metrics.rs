//! Per-iteration observability records and their JSONL encoding.
//!
//! Per-iteration wall-clock is kept out of the serialized record so that the
//! metrics log is byte-identical across same-seed runs; timings go to a
//! sidecar instead.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Real;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IterationMetrics {
    pub t: u64,
    /// Minibatch examples won per expert; sums to the batch size.
    pub win_counts: Vec<u32>,
    /// Mean discriminator score over the examples each expert won; `null`
    /// for experts that won none.
    pub mean_winning_score: Vec<Option<Real>>,
    /// Value of the discriminator's objective (0 is its maximum).
    pub d_loss: Real,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// First line of every metrics log: schema id and the config hash of the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema: String,
    pub config_hash: String,
}

pub struct JsonlWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(JsonlWriter { out })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        // flush per record so an abort keeps everything written so far
        self.out.flush()?;
        Ok(())
    }
}

/// Read back a metrics log, skipping the header line.
pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_skips_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let header = MetricsHeader {
            schema: "metrics/1".into(),
            config_hash: "abc".into(),
        };
        let mut w = JsonlWriter::create(&path, &header).unwrap();
        let m = IterationMetrics {
            t: 3,
            win_counts: vec![2, 0],
            mean_winning_score: vec![Some(0.5), None],
            d_loss: -1.25,
            wall_ms: 999,
        };
        w.write(&m).unwrap();
        drop(w);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].t, 3);
        assert_eq!(back[0].wall_ms, 0); // wall clock is not serialized
        assert_eq!(back[0].mean_winning_score, vec![Some(0.5), None]);
    }
}
