//! Synthetic reward models for the toy task.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ConditionSpace;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `−‖x − target‖`.
pub fn target_distance_reward(x: &[f64], target: &[f64]) -> f64 {
    -distance(x, target)
}

/// `−‖x − decode(c)‖` for a condition embedding `c`.
pub fn condition_alignment_reward(space: &ConditionSpace, x: &[f64], c: &[f64]) -> Result<f64> {
    Ok(-distance(x, &space.decode(c)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    #[default]
    TargetDistance,
    ConditionAlignment,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub target: Vec<f64>,
    /// Weights of the target-distance and alignment terms in composite mode.
    pub weights: [f64; 2],
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            kind: RewardKind::TargetDistance,
            target: vec![2.0, 2.0],
            weights: [0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub target: Vec<f64>,
    pub weights: [f64; 2],
    pub space: ConditionSpace,
}

impl RewardModel {
    pub fn new(config: &RewardConfig, space: ConditionSpace) -> Result<Self> {
        if config.kind != RewardKind::ConditionAlignment && config.target.len() != space.data_dim() {
            return Err(Error::config(format!(
                "reward target has {} coordinates, data has {}",
                config.target.len(),
                space.data_dim()
            )));
        }
        Ok(RewardModel {
            kind: config.kind,
            target: config.target.clone(),
            weights: config.weights,
            space,
        })
    }

    pub fn target_distance(target: Vec<f64>, space: ConditionSpace) -> Self {
        RewardModel {
            kind: RewardKind::TargetDistance,
            target,
            weights: [1.0, 0.0],
            space,
        }
    }

    pub fn condition_alignment(space: ConditionSpace) -> Self {
        RewardModel {
            kind: RewardKind::ConditionAlignment,
            target: Vec::new(),
            weights: [0.0, 1.0],
            space,
        }
    }

    /// Reward of `x` under condition id `cond`.
    pub fn score(&self, x: &[f64], cond: usize) -> Result<f64> {
        let align = |x: &[f64]| -> Result<f64> { Ok(-distance(x, &self.space.mean_of(cond)?)) };
        let r = match self.kind {
            RewardKind::TargetDistance => {
                if cond >= self.space.components() {
                    return Err(Error::Data(format!("unknown condition id {cond}")));
                }
                target_distance_reward(x, &self.target)
            }
            RewardKind::ConditionAlignment => align(x)?,
            RewardKind::Composite => {
                self.weights[0] * target_distance_reward(x, &self.target) + self.weights[1] * align(x)?
            }
        };
        if !r.is_finite() {
            return Err(Error::Data(format!("non-finite reward for {x:?}")));
        }
        Ok(r)
    }
}

/// Rewards of each row of `samples` under the matching condition id.
pub fn score_batch(reward: &RewardModel, samples: &Tensor, conditions: &[usize]) -> Result<Vec<f64>> {
    if samples.rows() != conditions.len() {
        return Err(Error::config(format!(
            "{} samples but {} conditions",
            samples.rows(),
            conditions.len()
        )));
    }
    (0..samples.rows())
        .map(|i| reward.score(samples.row(i), conditions[i]))
        .collect()
}

/// Writes `x0, x1, ..., condition, reward` rows with a header.
pub fn write_scored_csv(path: &Path, samples: &Tensor, conditions: &[usize], rewards: &[f64]) -> Result<()> {
    if samples.rows() != conditions.len() || conditions.len() != rewards.len() {
        return Err(Error::config("scored dataset columns differ in length"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let io = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = (0..samples.cols()).map(|j| format!("x{j}")).collect();
    header.push("condition".into());
    header.push("reward".into());
    w.write_record(&header).map_err(io)?;
    for i in 0..samples.rows() {
        let mut rec: Vec<String> = samples.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(conditions[i].to_string());
        rec.push(rewards[i].to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_scored_csv`].
pub fn read_scored_csv(path: &Path) -> Result<(Tensor, Vec<usize>, Vec<f64>)> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => fmt(e.to_string()),
    })?;
    let dim = r.headers().map_err(|e| fmt(e.to_string()))?.len().saturating_sub(2);
    let (mut xs, mut ids, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| fmt(format!("`{s}`: {e}")));
        for j in 0..dim {
            xs.push(parse(&rec[j])?);
        }
        ids.push(rec[dim].parse::<usize>().map_err(|e| fmt(e.to_string()))?);
        rs.push(parse(&rec[dim + 1])?);
    }
    Ok((Tensor::new(vec![ids.len(), dim], xs)?, ids, rs))
}
