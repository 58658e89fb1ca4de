//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{MaskingSchedule, PairMetric};
use crate::data::DataConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::numerics::AdamWConfig;
use crate::preference::DpoVariant;
use crate::rewards::RewardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Diffusion,
    Consistency,
}

impl Variant {
    pub fn dpo_variant(self) -> DpoVariant {
        match self {
            Variant::Diffusion => DpoVariant::Diffusion,
            Variant::Consistency => DpoVariant::Consistency,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Diffusion => "diffusion",
            Variant::Consistency => "consistency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    #[default]
    Reward,
    MaskFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub log_every: usize,
}

impl TrainConfig {
    fn pretrain_default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 128,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            log_every: 50,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config(format!(
                "{what}: batch_size and log_every must be positive"
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config(format!("{what}: learning rate must be positive")));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain_default()
    }
}

/// Data- and model-level curriculum knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Number of difficulty batches `B`.
    pub batches: usize,
    /// Iterations `K` of each stage before the last.
    pub stage_iterations: usize,
    /// Explicit per-stage budgets; overrides `stage_iterations` when set.
    pub stage_budgets: Option<Vec<usize>>,
    /// Generated samples per condition `M`.
    pub samples_per_condition: usize,
    pub pair_metric: PairMetric,
    /// Minimum reward gap for a pair.
    pub min_gap: f64,
    pub rank_start: usize,
    pub rank_end: usize,
    pub rank_delta: f64,
    /// Grow the adapter rank across stages; otherwise use `rank_end` throughout.
    pub rank_growth: bool,
    /// Grow the adapted block set across stages; otherwise adapt every block.
    pub layer_growth: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            batches: 5,
            stage_iterations: 200,
            stage_budgets: None,
            samples_per_condition: 64,
            pair_metric: PairMetric::RankDifference,
            min_gap: 0.0,
            rank_start: 1,
            rank_end: 4,
            rank_delta: 2.0,
            rank_growth: true,
            layer_growth: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Total optimizer steps `Σ H_k`.
    pub iterations: usize,
    /// Pairs per micro-batch.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub optimizer: AdamWConfig,
    /// DPO β; the variant's toy default when absent.
    pub beta: Option<f64>,
    pub log_every: usize,
    /// Samples drawn for the `mean_reward` column at each logged row.
    pub reward_samples: usize,
    /// Rows of the fixed probe input checked at stage boundaries.
    pub probe_size: usize,
    /// Mask-free mode: generated pairs per condition and masking ratio.
    pub pairs_per_ratio: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 2000,
            batch_size: 16,
            grad_accum: 1,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            beta: None,
            log_every: 50,
            reward_samples: 128,
            probe_size: 8,
            pairs_per_ratio: 64,
        }
    }
}

/// Toy-scale β: large full-scale values saturate the sigmoid on 2-D data.
pub fn toy_beta(variant: Variant) -> f64 {
    match variant {
        Variant::Diffusion => 0.05,
        Variant::Consistency => 1000.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Consistency sampling steps.
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 512,
            sampling_steps: 8,
            seed: 12345,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub teacher: Option<PathBuf>,
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub mode: FinetuneMode,
    pub data: DataConfig,
    pub model: NetConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: TrainConfig,
    pub distill: TrainConfig,
    pub finetune: FinetuneConfig,
    pub curriculum: CurriculumConfig,
    pub masking: MaskingSchedule,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            variant: Variant::Diffusion,
            mode: FinetuneMode::Reward,
            data: DataConfig::default(),
            model: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            distill: TrainConfig {
                iterations: 2000,
                batch_size: 128,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
                log_every: 50,
            },
            finetune: FinetuneConfig::default(),
            curriculum: CurriculumConfig::default(),
            masking: MaskingSchedule {
                interval: 200,
                ..MaskingSchedule::default()
            },
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates a config file, including referenced checkpoints.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text)?;
        for p in [&cfg.paths.teacher, &cfg.paths.base].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced checkpoint not found"),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn beta(&self) -> f64 {
        self.finetune.beta.unwrap_or_else(|| toy_beta(self.variant))
    }

    /// Per-stage iteration budgets `H_1..H_B`.
    pub fn stage_budgets(&self) -> Result<Vec<usize>> {
        let c = &self.curriculum;
        let total = self.finetune.iterations;
        let h = match &c.stage_budgets {
            Some(h) => h.clone(),
            None => {
                let early = c.stage_iterations * (c.batches - 1);
                if early > total {
                    return Err(Error::config(format!(
                        "{} stages of {} iterations exceed the budget of {total}",
                        c.batches - 1,
                        c.stage_iterations
                    )));
                }
                let mut h = vec![c.stage_iterations; c.batches - 1];
                h.push(total - early);
                h
            }
        };
        if h.len() != c.batches {
            return Err(Error::config(format!(
                "{} stage budgets for {} batches",
                h.len(),
                c.batches
            )));
        }
        let sum: usize = h.iter().sum();
        if sum != total {
            return Err(Error::config(format!("stage budgets sum to {sum}, expected {total}")));
        }
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.cond_dim != self.data.cond_dim || self.model.data_dim != 2 {
            return Err(Error::config("model dimensions must match the toy data"));
        }
        self.pretrain.validate("pretrain")?;
        self.distill.validate("distill")?;
        self.schedule.build()?;
        let f = &self.finetune;
        if f.batch_size == 0 || f.grad_accum == 0 || f.log_every == 0 || f.probe_size == 0 {
            return Err(Error::config("finetune sizes must be positive"));
        }
        if !(self.beta() > 0.0) {
            return Err(Error::config("beta must be positive"));
        }
        let c = &self.curriculum;
        if c.batches == 0 {
            return Err(Error::config("curriculum needs at least one batch"));
        }
        if self.mode == FinetuneMode::Reward && c.batches > c.samples_per_condition.saturating_sub(1) {
            return Err(Error::config(format!(
                "batch count {} needs at least {} samples per condition",
                c.batches,
                c.batches + 1
            )));
        }
        crate::lora::rank_schedule(c.rank_start, c.rank_end, c.rank_delta, c.batches)?;
        self.stage_budgets()?;
        self.masking.validate()?;
        if self.eval.sampling_steps == 0 || self.eval.sampling_steps > self.schedule.grid {
            return Err(Error::config("eval.sampling_steps must lie in 1..=schedule.grid"));
        }
        Ok(())
    }
}
