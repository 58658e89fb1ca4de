//! Per-metric plot series derived from a run's `metrics.csv`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::metrics::{read_metrics, MetricsRow};

type Column = fn(&MetricsRow) -> Option<String>;

const SERIES: [(&str, Column); 8] = [
    ("loss", |r| Some(r.loss.to_string())),
    ("grad_weight", |r| r.grad_weight.map(|v| v.to_string())),
    ("mean_reward", |r| r.mean_reward.map(|v| v.to_string())),
    ("implicit_acc", |r| r.implicit_acc.map(|v| v.to_string())),
    ("stage", |r| Some(r.stage.to_string())),
    ("rank", |r| Some(r.rank.to_string())),
    ("active_layers", |r| Some(r.active_layers.to_string())),
    ("trainable_params", |r| Some(r.trainable_params.to_string())),
];

/// Writes `curves/<metric>.csv` (`iteration,value`, empty value where the
/// metric was not recorded) and `curves/stage_boundaries.csv` listing the
/// first iteration of every stage after the first. Returns written paths.
pub fn emit_curves(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(&run_dir.join("metrics.csv"))?;
    let dir = run_dir.join("curves");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    for (name, col) in SERIES {
        let mut text = String::from("iteration,value\n");
        for r in &rows {
            text.push_str(&format!("{},{}\n", r.iteration, col(r).unwrap_or_default()));
        }
        let p = dir.join(format!("{name}.csv"));
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    let mut text = String::from("iteration,stage\n");
    for w in rows.windows(2) {
        if w[1].stage != w[0].stage {
            text.push_str(&format!("{},{}\n", w[1].iteration, w[1].stage));
        }
    }
    let p = dir.join("stage_boundaries.csv");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::write_metrics;

    fn row(iteration: usize, stage: usize) -> MetricsRow {
        MetricsRow {
            iteration,
            stage,
            rank: stage,
            active_layers: 3,
            trainable_params: 10,
            loss: 0.5,
            grad_weight: None,
            mean_reward: Some(-1.0),
            implicit_acc: None,
        }
    }

    #[test]
    fn boundaries_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (0..10).map(|i| row(i * 3, 1 + i / 2)).collect();
        write_metrics(&dir.path().join("metrics.csv"), &rows).unwrap();
        let files = emit_curves(dir.path()).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let b = std::fs::read_to_string(dir.path().join("curves/stage_boundaries.csv")).unwrap();
        assert_eq!(b.lines().count() - 1, 4);
        let loss = std::fs::read_to_string(dir.path().join("curves/loss.csv")).unwrap();
        assert_eq!(loss.lines().count() - 1, rows.len());
        emit_curves(dir.path()).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert!(matches!(
            emit_curves(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
