//! Training-metrics rows and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub stage: usize,
    pub rank: usize,
    pub active_layers: usize,
    pub trainable_params: usize,
    pub loss: f64,
    pub grad_weight: Option<f64>,
    pub mean_reward: Option<f64>,
    pub implicit_acc: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "iteration",
    "stage",
    "rank",
    "active_layers",
    "trainable_params",
    "loss",
    "grad_weight",
    "mean_reward",
    "implicit_acc",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRIC_COLUMNS)
            .map_err(|e| Error::config(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::config(e.to_string()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, metrics_to_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_empty_cells() {
        let rows = vec![
            MetricsRow {
                iteration: 0,
                stage: 1,
                rank: 2,
                active_layers: 15,
                trainable_params: 100,
                loss: std::f64::consts::LN_2,
                grad_weight: Some(0.5),
                mean_reward: None,
                implicit_acc: Some(0.0),
            },
            MetricsRow {
                iteration: 5,
                stage: 2,
                rank: 4,
                active_layers: 25,
                trainable_params: 300,
                loss: 0.5,
                grad_weight: None,
                mean_reward: Some(-1.25),
                implicit_acc: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&METRIC_COLUMNS.join(",")));
        assert!(text.contains("0,1,2,15,100,0.6931471805599453,0.5,,0.0"));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
