//! Run-directory artifacts. Files are rewritten through a temporary file and
//! a rename, so readers never see a partial file; `metrics.csv` only ever
//! gains rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "lr", "train_loss", "val_metric", "test_metric"];
pub const WEIGHTS_HEADER: [&str; 5] = ["epoch", "min_weight", "mean_weight", "max_weight", "std_weight"];

/// Writes `bytes` to `<path>.tmp`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn csv_bytes<R: AsRef<[String]>>(header: &[&str], rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.as_ref())?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

/// Per-generation output directory.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    metrics: Vec<[String; 5]>,
    weights: Option<Vec<[String; 5]>>,
}

impl RunWriter {
    pub fn create(dir: &Path, weight_stats: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = RunWriter {
            dir: dir.to_path_buf(),
            metrics: Vec::new(),
            weights: weight_stats.then(Vec::new),
        };
        write_atomic(
            &w.dir.join("metrics.csv"),
            &csv_bytes::<[String; 5]>(&METRICS_HEADER, &[])?,
        )?;
        Ok(w)
    }

    pub fn push_epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        self.metrics.push([
            m.epoch.to_string(),
            m.lr.to_string(),
            m.train_loss.to_string(),
            m.val_metric.to_string(),
            m.test_metric.to_string(),
        ]);
        write_atomic(
            &self.dir.join("metrics.csv"),
            &csv_bytes(&METRICS_HEADER, &self.metrics)?,
        )
    }

    /// Appends one row of per-epoch confidence-weight statistics.
    pub fn push_weights(&mut self, row: [String; 5]) -> Result<()> {
        let rows = self.weights.get_or_insert_with(Vec::new);
        rows.push(row);
        let bytes = csv_bytes(&WEIGHTS_HEADER, rows)?;
        write_atomic(&self.dir.join("cwtm_weights.csv"), &bytes)
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Format {
            offset: 0,
            detail: format!("{}: unexpected header {header:?}", path.display()),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::create(dir.path(), false).unwrap();
        assert!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap().is_empty());
        let m = EpochMetrics {
            epoch: 0,
            lr: 0.1,
            train_loss: 1.0 / 3.0,
            val_metric: 0.25,
            test_metric: 0.5,
        };
        w.push_epoch(&m).unwrap();
        assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), vec![m]);
    }
}
