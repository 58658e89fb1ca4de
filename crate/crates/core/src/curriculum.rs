//! Data-level curriculum: per-condition ranking, pair construction,
//! difficulty batches and the cumulative training pool. Also the masking
//! schedule used when no reward model is available.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{child_rng, SeededRng};
use crate::numerics::Tensor;
use crate::preference::PreferencePair;
use crate::rewards::{score_batch, RewardModel};

/// Samples of one condition in descending reward order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSet {
    pub condition: usize,
    /// Original sample index of each ranked position.
    pub order: Vec<usize>,
    /// Rewards in ranked order.
    pub rewards: Vec<f64>,
}

impl RankedSet {
    /// Ranks raw rewards; ties keep their original relative order.
    pub fn from_rewards(condition: usize, rewards: &[f64]) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::config("ranking needs at least two samples"));
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(Error::Data(format!(
                "sample {i} of condition {condition} has non-finite reward {}",
                rewards[i]
            )));
        }
        let mut order: Vec<usize> = (0..rewards.len()).collect();
        order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]));
        let sorted = order.iter().map(|&i| rewards[i]).collect();
        Ok(RankedSet {
            condition,
            order,
            rewards: sorted,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Scores `samples` under `condition` and ranks them.
pub fn rank_samples(samples: &Tensor, condition: usize, reward: &RewardModel) -> Result<RankedSet> {
    let r = score_batch(reward, samples, &vec![condition; samples.rows()])?;
    RankedSet::from_rewards(condition, &r)
}

/// A pair of ranked positions `i < j` with `gap = r_i − r_j > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankPair {
    pub i: usize,
    pub j: usize,
    pub gap: f64,
}

impl RankPair {
    pub fn rank_gap(&self) -> usize {
        self.j - self.i
    }
}

/// All ranked pairs whose reward gap is strictly positive and above `min_gap`.
pub fn build_pairs(ranked: &RankedSet, min_gap: f64) -> Vec<RankPair> {
    let m = ranked.len();
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            let gap = ranked.rewards[i] - ranked.rewards[j];
            if gap > 0.0 && gap > min_gap {
                out.push(RankPair { i, j, gap });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PairMetric {
    #[default]
    RankDifference,
    ScoreDifference,
}

/// Half-open difficulty intervals `(lower[k], upper[k]]`, easiest first.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BatchLimits {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    fn from_boundaries(b: Vec<f64>) -> Self {
        BatchLimits {
            upper: b[..b.len() - 1].to_vec(),
            lower: b[1..].to_vec(),
        }
    }

    fn find(&self, v: f64) -> Option<usize> {
        (0..self.len()).find(|&k| v > self.lower[k] && v <= self.upper[k])
    }
}

/// `L_k = (M−1)(B−k)/B` and `R_k = (M−1)(B−k+1)/B` for `k = 1..B`.
pub fn batch_limits(m: usize, b: usize) -> Result<BatchLimits> {
    if m < 2 {
        return Err(Error::config(format!("need at least 2 samples per condition, got {m}")));
    }
    if b == 0 || b > m - 1 {
        return Err(Error::config(format!("batch count {b} outside 1..={}", m - 1)));
    }
    let span = (m - 1) as f64;
    let bounds = (0..=b).map(|k| span * (b - k) as f64 / b as f64).collect();
    Ok(BatchLimits::from_boundaries(bounds))
}

/// Equal-mass bins of the reward gaps, largest gaps first. The last lower
/// bound is 0, so every positive gap not above the maximum is covered.
pub fn score_limits(gaps: &[f64], b: usize) -> Result<BatchLimits> {
    if b == 0 {
        return Err(Error::config("batch count must be positive"));
    }
    if gaps.is_empty() {
        return Err(Error::config("score limits need at least one pair"));
    }
    let mut d = gaps.to_vec();
    d.sort_by(|x, y| y.total_cmp(x));
    let p = d.len();
    let mut bounds = vec![d[0]];
    for k in 1..b {
        let idx = (k * p).div_ceil(b);
        bounds.push(if idx < p { d[idx] } else { 0.0 });
    }
    bounds.push(0.0);
    Ok(BatchLimits::from_boundaries(bounds))
}

/// Indices into the pair list for each batch, plus how many pairs matched
/// no interval and were placed in the hardest batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    pub batches: Vec<Vec<usize>>,
    pub unmatched: usize,
}

pub fn partition_pairs(pairs: &[RankPair], limits: &BatchLimits, metric: PairMetric) -> Partition {
    let nb = limits.len();
    let mut part = Partition {
        batches: vec![Vec::new(); nb],
        unmatched: 0,
    };
    for (idx, p) in pairs.iter().enumerate() {
        let v = match metric {
            PairMetric::RankDifference => p.rank_gap() as f64,
            PairMetric::ScoreDifference => p.gap,
        };
        match limits.find(v) {
            Some(k) => part.batches[k].push(idx),
            None => {
                part.batches[nb - 1].push(idx);
                part.unmatched += 1;
            }
        }
    }
    part
}

/// `S_1 ∪ … ∪ S_k` for `1 <= k <= B`.
pub fn active_pool(partition: &Partition, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > partition.batches.len() {
        return Err(Error::Range(format!(
            "stage {k} outside 1..={}",
            partition.batches.len()
        )));
    }
    Ok(partition.batches[..k].iter().flatten().copied().collect())
}

/// Ranked samples and difficulty batches of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCurriculum {
    pub condition: usize,
    pub embedding: Vec<f64>,
    /// Samples in ranked order.
    pub samples: Tensor,
    pub ranked: RankedSet,
    pub pairs: Vec<RankPair>,
    pub partition: Partition,
}

impl ConditionCurriculum {
    pub fn build(
        condition: usize,
        embedding: Vec<f64>,
        samples: &Tensor,
        rewards: &[f64],
        batches: usize,
        metric: PairMetric,
        min_gap: f64,
    ) -> Result<Self> {
        let ranked = RankedSet::from_rewards(condition, rewards)?;
        let pairs = build_pairs(&ranked, min_gap);
        let limits = match metric {
            PairMetric::RankDifference => batch_limits(ranked.len(), batches)?,
            PairMetric::ScoreDifference => {
                let gaps: Vec<f64> = pairs.iter().map(|p| p.gap).collect();
                if gaps.is_empty() {
                    batch_limits(ranked.len(), batches)?
                } else {
                    score_limits(&gaps, batches)?
                }
            }
        };
        let partition = partition_pairs(&pairs, &limits, metric);
        Ok(ConditionCurriculum {
            condition,
            embedding,
            samples: samples.select_rows(&ranked.order),
            ranked,
            pairs,
            partition,
        })
    }

    pub fn pair(&self, idx: usize) -> Result<PreferencePair> {
        let p = self.pairs[idx];
        PreferencePair::new(
            self.samples.row(p.i).to_vec(),
            self.samples.row(p.j).to_vec(),
            self.embedding.clone(),
            p.gap,
        )
    }
}

/// Uniform sampling over conditions, then over the active pairs of the
/// chosen condition.
#[derive(Debug, Clone)]
pub struct PairPool {
    conditions: Vec<ConditionCurriculum>,
    active: Vec<Vec<usize>>,
}

impl PairPool {
    pub fn new(conditions: Vec<ConditionCurriculum>) -> Self {
        let n = conditions.len();
        PairPool {
            conditions,
            active: vec![Vec::new(); n],
        }
    }

    pub fn conditions(&self) -> &[ConditionCurriculum] {
        &self.conditions
    }

    pub fn batch_count(&self) -> usize {
        self.conditions.first().map_or(0, |c| c.partition.batches.len())
    }

    /// Makes `S_1 ∪ … ∪ S_k` active for every condition.
    pub fn activate(&mut self, k: usize) -> Result<()> {
        for (a, c) in self.active.iter_mut().zip(&self.conditions) {
            *a = active_pool(&c.partition, k)?;
        }
        Ok(())
    }

    pub fn active_len(&self) -> usize {
        self.active.iter().map(Vec::len).sum()
    }

    pub fn total_pairs(&self) -> usize {
        self.conditions.iter().map(|c| c.pairs.len()).sum()
    }

    pub fn unmatched(&self) -> usize {
        self.conditions.iter().map(|c| c.partition.unmatched).sum()
    }

    pub fn sample(&self, rng: &mut SeededRng, n: usize) -> Result<Vec<PreferencePair>> {
        let live: Vec<usize> = (0..self.active.len()).filter(|&i| !self.active[i].is_empty()).collect();
        if live.is_empty() {
            return Err(Error::Data("active pair pool is empty".into()));
        }
        (0..n)
            .map(|_| {
                let ci = live[rng.random_range(0..live.len())];
                let pool = &self.active[ci];
                let pi = pool[rng.random_range(0..pool.len())];
                self.conditions[ci].pair(pi)
            })
            .collect()
    }
}

/// Losers' masking ratio `max(end, start − decrement·⌊iteration/interval⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingSchedule {
    pub start_ratio: f64,
    pub end_ratio: f64,
    pub decrement: f64,
    pub interval: usize,
}

impl Default for MaskingSchedule {
    fn default() -> Self {
        MaskingSchedule {
            start_ratio: 0.9,
            end_ratio: 0.1,
            decrement: 0.1,
            interval: 1000,
        }
    }
}

/// Ratios are rounded to 12 decimals so that repeated decrements land on
/// the intended grid values.
fn tidy(r: f64) -> f64 {
    (r * 1e12).round() / 1e12
}

impl MaskingSchedule {
    pub fn validate(&self) -> Result<()> {
        let unit = |r: f64| (0.0..=1.0).contains(&r);
        if !unit(self.start_ratio) || !unit(self.end_ratio) || self.start_ratio < self.end_ratio {
            return Err(Error::config("masking ratios must satisfy 0 <= end <= start <= 1"));
        }
        if !(self.decrement > 0.0) || self.interval == 0 {
            return Err(Error::config("masking decrement and interval must be positive"));
        }
        Ok(())
    }

    pub fn ratio(&self, iteration: usize) -> f64 {
        let steps = (iteration / self.interval) as f64;
        tidy((self.start_ratio - self.decrement * steps).max(self.end_ratio))
    }

    /// Distinct ratios visited, from start down to end.
    pub fn ratios(&self) -> Vec<f64> {
        let mut out = vec![self.ratio(0)];
        let mut i = 0;
        while *out.last().unwrap() > self.end_ratio {
            i += self.interval;
            out.push(self.ratio(i));
        }
        out
    }
}

/// Zeroes exactly `round(ratio·dim)` coordinates chosen without replacement.
pub fn mask_embedding(c: &[f64], ratio: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Range(format!("masking ratio {ratio} outside [0, 1]")));
    }
    let k = (ratio * c.len() as f64).round() as usize;
    let mut out = c.to_vec();
    let mut rng = child_rng(seed, "mask");
    for i in sample_indices(&mut rng, c.len(), k) {
        out[i] = 0.0;
    }
    Ok(out)
}

/// Anything that maps condition embeddings to samples deterministically under a seed.
pub trait ConditionalGenerator {
    fn generate(&self, c: &Tensor, seed: u64) -> Result<Tensor>;
}

/// Winners from the clean embeddings, losers from masked copies at the
/// scheduled ratio. Both share the sampling seed, so each pair differs only
/// through the conditioning. The pair gap records the masking ratio.
pub fn masking_curriculum_pairs(
    generator: &impl ConditionalGenerator,
    conditions: &Tensor,
    schedule: &MaskingSchedule,
    iteration: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    masked_pairs_at(generator, conditions, schedule.ratio(iteration), seed)
}

/// [`masking_curriculum_pairs`] at an explicit ratio.
pub fn masked_pairs_at(
    generator: &impl ConditionalGenerator,
    conditions: &Tensor,
    ratio: f64,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if !(ratio > 0.0) {
        return Err(Error::config("loser masking ratio must be positive"));
    }
    let mut masked = conditions.clone();
    for i in 0..conditions.rows() {
        let m = mask_embedding(
            conditions.row(i),
            ratio,
            crate::numerics::rng::derive_seed(seed, &format!("row{i}")),
        )?;
        masked.row_mut(i).copy_from_slice(&m);
    }
    let w = generator.generate(conditions, seed)?;
    let l = generator.generate(&masked, seed)?;
    (0..conditions.rows())
        .map(|i| PreferencePair::new(w.row(i).to_vec(), l.row(i).to_vec(), conditions.row(i).to_vec(), ratio))
        .collect()
}
