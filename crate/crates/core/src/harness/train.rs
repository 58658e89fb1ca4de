//! Training loops: diffusion pretraining, consistency distillation and
//! staged preference fine-tuning.

use std::path::Path;

use crate::consistency::{consistency_distill_loss_graph, ConsistencyFunction, DistillDraws};
use crate::curriculum::{masked_pairs_at, ConditionCurriculum, ConditionalGenerator, PairPool};
use crate::data::ToyMixture;
use crate::diffusion::{simple_loss_graph, Denoiser, NoiseDraws, NoiseSchedule, TimeGrid};
use crate::error::{Error, Result};
use crate::lora::{self, grow_rank, init_adapter, LoraAdapter};
use crate::nn::DenoiserNet;
use crate::numerics::rng::{child_rng, derive_seed, normal_tensor, SeededRng};
use crate::numerics::{evaluate_with_gradients, AdamWState, Gradients, Tensor};
use crate::preference::{
    consistency_dpo_loss_graph, diffusion_dpo_loss_graph, DiffusionDpoDraws, DpoStats, PairBatch, PreferencePair,
};
use crate::rewards::{score_batch, RewardModel};

use super::config::{ExperimentConfig, FinetuneMode};
use super::metrics::{write_metrics, MetricsRow};
use super::models::{Model, Sampler, SamplerSpec};

/// Everything derived from a config that the loops share.
#[derive(Debug, Clone)]
pub struct Context {
    pub mixture: ToyMixture,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub spec: SamplerSpec,
    pub reward: RewardModel,
}

impl Context {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mixture = ToyMixture::new(cfg.data)?;
        let (schedule, grid) = cfg.schedule.build()?;
        let reward = RewardModel::new(&cfg.reward, mixture.space.clone())?;
        let spec = SamplerSpec {
            schedule: schedule.clone(),
            grid: grid.clone(),
            consistency_steps: cfg.eval.sampling_steps,
        };
        Ok(Context {
            mixture,
            schedule,
            grid,
            spec,
            reward,
        })
    }

    pub fn sampler<'a>(&'a self, model: &'a Model) -> Sampler<'a> {
        Sampler {
            model,
            spec: &self.spec,
        }
    }

    /// Condition ids cycling through the components, and their embeddings.
    pub fn cycled_conditions(&self, n: usize) -> Result<(Vec<usize>, Tensor)> {
        let k = self.mixture.config.components;
        let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
        let c = self.mixture.space.embed_all(&ids)?;
        Ok((ids, c))
    }

    /// Mean reward of `n` samples drawn with `seed`.
    pub fn mean_sampled_reward(&self, model: &Model, n: usize, seed: u64) -> Result<f64> {
        let (ids, c) = self.cycled_conditions(n)?;
        let x = self.sampler(model).generate(&c, seed)?;
        let r = score_batch(&self.reward, &x, &ids)?;
        Ok(r.iter().sum::<f64>() / n as f64)
    }
}

/// Accumulates per-iteration values and emits averaged rows.
struct Logger {
    rows: Vec<MetricsRow>,
    loss: Vec<f64>,
    weight: Vec<f64>,
    acc: Vec<f64>,
}

struct RowInfo {
    iteration: usize,
    stage: usize,
    rank: usize,
    active_layers: usize,
    trainable_params: usize,
    mean_reward: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Logger {
    fn new() -> Self {
        Logger {
            rows: Vec::new(),
            loss: Vec::new(),
            weight: Vec::new(),
            acc: Vec::new(),
        }
    }

    fn record(&mut self, loss: f64, stats: Option<DpoStats>) {
        self.loss.push(loss);
        if let Some(s) = stats {
            self.weight.push(s.weight);
            self.acc.push(s.accuracy);
        }
    }

    fn emit(&mut self, info: RowInfo) {
        self.rows.push(MetricsRow {
            iteration: info.iteration,
            stage: info.stage,
            rank: info.rank,
            active_layers: info.active_layers,
            trainable_params: info.trainable_params,
            loss: mean(&self.loss).unwrap_or(f64::NAN),
            grad_weight: mean(&self.weight),
            mean_reward: info.mean_reward,
            implicit_acc: mean(&self.acc),
        });
        self.loss.clear();
        self.weight.clear();
        self.acc.clear();
    }
}

/// Whether local step `i` (0-based) of a stage with `len` steps gets a row.
fn is_log_step(i: usize, len: usize, every: usize) -> bool {
    i == 0 || (i + 1).is_multiple_of(every) || i + 1 == len
}

fn write_run(out: Option<&Path>, cfg: &ExperimentConfig, model: &Model, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(&dir.join("checkpoint.bin"))?;
        write_metrics(&dir.join("metrics.csv"), rows)?;
        let p = dir.join("config.toml");
        std::fs::write(&p, cfg.to_toml_string()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    /// Loss at every iteration.
    pub losses: Vec<f64>,
}

/// Trains a denoiser on the toy mixture with the simple loss.
pub fn pretrain(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutput> {
    let ctx = Context::new(cfg)?;
    let steps = ctx.schedule.steps();
    let net = DenoiserNet::new(cfg.model, steps, derive_seed(cfg.seed, "init"))?;
    let mut den = Denoiser::new(net);
    let tc = cfg.pretrain;
    let mut opt = AdamWState::new(tc.optimizer, &den.net.params);
    let mut rng = child_rng(cfg.seed, "pretrain");
    let mut log = Logger::new();
    let mut losses = Vec::with_capacity(tc.iterations);
    let dim = ctx.mixture.data_dim();
    for it in 0..tc.iterations {
        let (x0, ids) = ctx.mixture.sample(&mut rng, tc.batch_size);
        let c = ctx.mixture.training_conditions(&mut rng, &ids)?;
        let draws = NoiseDraws::sample(&mut rng, tc.batch_size, dim, steps);
        let (loss, grads) = evaluate_with_gradients(&den.net.params, |g| {
            simple_loss_graph(g, &den, &x0, &c, &draws, &ctx.schedule)
        })?;
        opt.step(&mut den.net.params, &grads)?;
        losses.push(loss);
        log.record(loss, None);
        if is_log_step(it, tc.iterations, tc.log_every) {
            log.emit(RowInfo {
                iteration: it,
                stage: 0,
                rank: 0,
                active_layers: 0,
                trainable_params: den.net.params.trainable_count(),
                mean_reward: None,
            });
        }
    }
    let model = Model::Diffusion(den);
    write_run(out, cfg, &model, &log.rows)?;
    Ok(TrainOutput {
        model,
        rows: log.rows,
        losses,
    })
}

/// Distills a consistency model from `teacher`, starting from its weights.
pub fn distill(cfg: &ExperimentConfig, teacher: &Denoiser, out: Option<&Path>) -> Result<TrainOutput> {
    let ctx = Context::new(cfg)?;
    let mut f = ConsistencyFunction::new(teacher.net.clone(), &ctx.grid);
    let tc = cfg.distill;
    let mut opt = AdamWState::new(tc.optimizer, &f.net.params);
    let mut rng = child_rng(cfg.seed, "distill");
    let mut log = Logger::new();
    let mut losses = Vec::with_capacity(tc.iterations);
    let dim = ctx.mixture.data_dim();
    for it in 0..tc.iterations {
        let (x0, ids) = ctx.mixture.sample(&mut rng, tc.batch_size);
        let c = ctx.mixture.training_conditions(&mut rng, &ids)?;
        let draws = DistillDraws::sample(&mut rng, tc.batch_size, dim, &ctx.grid);
        let (loss, grads) = evaluate_with_gradients(&f.net.params, |g| {
            consistency_distill_loss_graph(g, &f, teacher, &x0, &c, &draws, &ctx.grid, &ctx.schedule)
        })?;
        opt.step(&mut f.net.params, &grads)?;
        losses.push(loss);
        log.record(loss, None);
        if is_log_step(it, tc.iterations, tc.log_every) {
            log.emit(RowInfo {
                iteration: it,
                stage: 0,
                rank: 0,
                active_layers: 0,
                trainable_params: f.net.params.trainable_count(),
                mean_reward: None,
            });
        }
    }
    let model = Model::Consistency(f);
    write_run(out, cfg, &model, &log.rows)?;
    Ok(TrainOutput {
        model,
        rows: log.rows,
        losses,
    })
}

/// Preference pairs available to the fine-tuning loop.
enum PairSource {
    Ranked(PairPool),
    /// One pool per masking ratio, indexed `[ratio][condition]`.
    Masked {
        ratios: Vec<f64>,
        pools: Vec<Vec<Vec<PreferencePair>>>,
    },
}

impl PairSource {
    fn activate(&mut self, stage: usize) -> Result<()> {
        match self {
            PairSource::Ranked(p) => p.activate(stage),
            PairSource::Masked { .. } => Ok(()),
        }
    }

    fn draw(&self, rng: &mut SeededRng, n: usize, ratio: f64) -> Result<Vec<PreferencePair>> {
        use rand::Rng;
        match self {
            PairSource::Ranked(p) => p.sample(rng, n),
            PairSource::Masked { ratios, pools } => {
                let ri = ratios
                    .iter()
                    .position(|&r| r == ratio)
                    .ok_or_else(|| Error::Contract(format!("no pool for masking ratio {ratio}")))?;
                let per_cond = &pools[ri];
                Ok((0..n)
                    .map(|_| {
                        let c = &per_cond[rng.random_range(0..per_cond.len())];
                        c[rng.random_range(0..c.len())].clone()
                    })
                    .collect())
            }
        }
    }

    fn unmatched(&self) -> usize {
        match self {
            PairSource::Ranked(p) => p.unmatched(),
            PairSource::Masked { .. } => 0,
        }
    }
}

/// Generates, scores and ranks `M` samples per condition from `base`.
fn ranked_source(cfg: &ExperimentConfig, ctx: &Context, base: &Model, batches: usize) -> Result<PairSource> {
    let m = cfg.curriculum.samples_per_condition;
    let sampler = ctx.sampler(base);
    let mut conds = Vec::new();
    for cond in 0..ctx.mixture.config.components {
        let emb = ctx.mixture.space.embed(cond)?;
        let c = ctx.mixture.space.embed_all(&vec![cond; m])?;
        let x = sampler.generate(&c, derive_seed(cfg.seed, &format!("generate/{cond}")))?;
        let r = score_batch(&ctx.reward, &x, &vec![cond; m])?;
        conds.push(ConditionCurriculum::build(
            cond,
            emb,
            &x,
            &r,
            batches,
            cfg.curriculum.pair_metric,
            cfg.curriculum.min_gap,
        )?);
    }
    Ok(PairSource::Ranked(PairPool::new(conds)))
}

/// Pre-generates winner/loser pools for every masking ratio the schedule visits.
fn masked_source(cfg: &ExperimentConfig, ctx: &Context, base: &Model) -> Result<PairSource> {
    let k = ctx.mixture.config.components;
    let per = cfg.finetune.pairs_per_ratio;
    let ids: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, per)).collect();
    let c = ctx.mixture.space.embed_all(&ids)?;
    let ratios = cfg.masking.ratios();
    let sampler = ctx.sampler(base);
    let mut pools = Vec::with_capacity(ratios.len());
    for (ri, &ratio) in ratios.iter().enumerate() {
        let pairs = masked_pairs_at(&sampler, &c, ratio, derive_seed(cfg.seed, &format!("mask-pool/{ri}")))?;
        let mut by_cond = vec![Vec::with_capacity(per); k];
        for (p, &id) in pairs.into_iter().zip(&ids) {
            by_cond[id].push(p);
        }
        pools.push(by_cond);
    }
    Ok(PairSource::Masked { ratios, pools })
}

/// Adds or enlarges adapters on every linear of `blocks` so each has `rank`.
/// New adapters start with `C = 0`; grown ones are zero-padded, so the
/// network function is unchanged.
pub fn grow_capacity(net: &mut DenoiserNet, blocks: &[String], rank: usize, seed: u64, stage: usize) -> Result<()> {
    for b in blocks {
        for lin in net.block_layers(b) {
            let id = lin.id.clone();
            match LoraAdapter::extract(&net.params, &id) {
                Some(old) if old.rank() < rank => {
                    let s = derive_seed(seed, &format!("lora/grow/{id}/{stage}"));
                    grow_rank(&old, rank, s)?.install(&mut net.params, true);
                }
                Some(_) => {}
                None => {
                    let s = derive_seed(seed, &format!("lora/init/{id}"));
                    init_adapter(&id, (lin.out_dim, lin.in_dim), rank, s)?.install(&mut net.params, true);
                }
            }
        }
    }
    Ok(())
}

fn adapted_layers(net: &DenoiserNet) -> usize {
    lora::installed_adapters(&net.params).len()
}

/// Fixed inputs on which the model output is compared across stage boundaries.
pub fn probe_inputs(ctx: &Context, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut rng = child_rng(seed, "probe");
    let x = normal_tensor(&mut rng, &[n, ctx.mixture.data_dim()], 2.0);
    let steps = ctx.schedule.steps();
    let t = (0..n)
        .map(|i| if n == 1 { steps } else { 1 + i * (steps - 1) / (n - 1) })
        .collect();
    let (_, c) = ctx.cycled_conditions(n)?;
    Ok((x, t, c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTransition {
    pub stage: usize,
    /// First iteration of the stage.
    pub iteration: usize,
    pub rank: usize,
    pub blocks: Vec<String>,
    pub trainable_params: usize,
    pub active_pairs: usize,
    /// Largest probe-output change caused by the capacity growth.
    pub probe_max_diff: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    /// Fine-tuned model with adapters merged into the base weights.
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub transitions: Vec<StageTransition>,
    pub optimizer_steps: usize,
    /// Reference parameters were bit-identical before and after training.
    pub reference_intact: bool,
    /// Pairs that fell in no score-metric interval.
    pub unmatched_pairs: usize,
}

/// Loss, gradients and pair statistics of one micro-batch.
#[allow(clippy::too_many_arguments)]
fn dpo_micro_step(
    model: &Model,
    reference: &Model,
    teacher: Option<&Denoiser>,
    pairs: &[PreferencePair],
    rng: &mut SeededRng,
    ctx: &Context,
    beta: f64,
) -> Result<(f64, Gradients, DpoStats)> {
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let batch = PairBatch::from_pairs(&refs)?;
    let dim = ctx.mixture.data_dim();
    let mut stats = None;
    let (loss, grads) = match (model, reference) {
        (Model::Diffusion(m), Model::Diffusion(r)) => {
            let draws = DiffusionDpoDraws::sample(rng, batch.len(), dim, ctx.schedule.steps());
            evaluate_with_gradients(&m.net.params, |g| {
                let (v, s) = diffusion_dpo_loss_graph(g, m, r, &batch, &draws, &ctx.schedule, beta)?;
                stats = Some(s);
                Ok(v)
            })?
        }
        (Model::Consistency(m), Model::Consistency(r)) => {
            let teacher = teacher.ok_or_else(|| Error::config("consistency fine-tuning needs a teacher"))?;
            let draws = DistillDraws::sample(rng, batch.len(), dim, &ctx.grid);
            evaluate_with_gradients(&m.net.params, |g| {
                let (v, s) =
                    consistency_dpo_loss_graph(g, m, r, teacher, &batch, &draws, &ctx.grid, &ctx.schedule, beta)?;
                stats = Some(s);
                Ok(v)
            })?
        }
        _ => return Err(Error::config("model and reference variants differ")),
    };
    Ok((loss, grads, stats.expect("loss evaluated")))
}

/// Plan of the staged loop: budgets, ranks and block sets per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub budgets: Vec<usize>,
    pub ranks: Vec<usize>,
    pub blocks: Vec<Vec<String>>,
}

impl StagePlan {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let c = &cfg.curriculum;
        let b = c.batches;
        let ranks = if c.rank_growth {
            lora::rank_schedule(c.rank_start, c.rank_end, c.rank_delta, b)?
        } else {
            vec![c.rank_end; b]
        };
        let blocks = if c.layer_growth {
            lora::layer_schedule(cfg.model.depth, b)
        } else {
            vec![lora::all_blocks(cfg.model.depth); b]
        };
        Ok(StagePlan {
            budgets: cfg.stage_budgets()?,
            ranks,
            blocks,
        })
    }

    /// Single stage with every block at `rank_end`: plain DPO.
    pub fn plain(cfg: &ExperimentConfig) -> Self {
        StagePlan {
            budgets: vec![cfg.finetune.iterations],
            ranks: vec![cfg.curriculum.rank_end],
            blocks: vec![lora::all_blocks(cfg.model.depth)],
        }
    }
}

/// Curriculum preference fine-tuning of `base`.
///
/// Each stage first extends the pair pool, the adapted block set and the
/// adapter rank, then runs its iteration budget. Adapters are merged at
/// the end. `teacher` is required for consistency models.
pub fn finetune_curriculum(
    cfg: &ExperimentConfig,
    base: &Model,
    teacher: Option<&Denoiser>,
    out: Option<&Path>,
) -> Result<FinetuneOutput> {
    let plan = StagePlan::from_config(cfg)?;
    run_staged(cfg, base, teacher, &plan, cfg.curriculum.batches, out)
}

/// Preference fine-tuning without any curriculum: every pair is available
/// from the first step and every block is adapted at the final rank.
pub fn finetune_plain(
    cfg: &ExperimentConfig,
    base: &Model,
    teacher: Option<&Denoiser>,
    out: Option<&Path>,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    run_staged(cfg, base, teacher, &StagePlan::plain(cfg), 1, out)
}

fn run_staged(
    cfg: &ExperimentConfig,
    base: &Model,
    teacher: Option<&Denoiser>,
    plan: &StagePlan,
    batches: usize,
    out: Option<&Path>,
) -> Result<FinetuneOutput> {
    let ctx = Context::new(cfg)?;
    if base.variant() != cfg.variant {
        return Err(Error::config(format!(
            "config variant is {} but the base checkpoint holds a {} model",
            cfg.variant.name(),
            base.variant().name()
        )));
    }
    if !lora::installed_adapters(&base.net().params).is_empty() {
        return Err(Error::config("base checkpoint still carries adapters"));
    }
    let beta = cfg.beta();
    let fc = cfg.finetune;
    let reference = base.clone();
    let reference_bytes = reference.to_checkpoint().to_bytes();

    let mut source = match cfg.mode {
        FinetuneMode::Reward => ranked_source(cfg, &ctx, base, batches)?,
        FinetuneMode::MaskFree => masked_source(cfg, &ctx, base)?,
    };

    let mut model = base.clone();
    model.net_mut().params.freeze_all();
    let mut opt = AdamWState::new(fc.optimizer, &model.net().params);
    let (px, pt, pc) = probe_inputs(&ctx, fc.probe_size, cfg.seed)?;
    let mut rng = child_rng(cfg.seed, "finetune");
    let reward_seed = derive_seed(cfg.seed, "finetune/reward");
    let mut log = Logger::new();
    let mut transitions = Vec::new();
    let mut it = 0;

    for (si, &budget) in plan.budgets.iter().enumerate() {
        let stage = si + 1;
        let before = model.evaluate(&px, &pt, &pc, &ctx.schedule)?;
        source.activate(stage.min(batches))?;
        grow_capacity(model.net_mut(), &plan.blocks[si], plan.ranks[si], cfg.seed, stage)?;
        opt.realign(&model.net().params);
        let after = model.evaluate(&px, &pt, &pc, &ctx.schedule)?;
        let active_pairs = match &source {
            PairSource::Ranked(p) => p.active_len(),
            PairSource::Masked { pools, .. } => pools.first().map_or(0, |p| p.iter().map(Vec::len).sum()),
        };
        transitions.push(StageTransition {
            stage,
            iteration: it,
            rank: plan.ranks[si],
            blocks: plan.blocks[si].clone(),
            trainable_params: model.net().params.trainable_count(),
            active_pairs,
            probe_max_diff: before.max_abs_diff(&after),
        });
        let layers = adapted_layers(model.net());
        for local in 0..budget {
            let ratio = cfg.masking.ratio(it);
            let mut total = Gradients::default();
            let mut loss = 0.0;
            let mut stats = DpoStats {
                loss: 0.0,
                weight: 0.0,
                accuracy: 0.0,
            };
            for micro in 0..fc.grad_accum {
                let pairs = source.draw(&mut rng, fc.batch_size, ratio)?;
                let (l, g, s) = dpo_micro_step(&model, &reference, teacher, &pairs, &mut rng, &ctx, beta)?;
                if micro == 0 {
                    total = g;
                } else {
                    total.accumulate(&g)?;
                }
                loss += l;
                stats.weight += s.weight;
                stats.accuracy += s.accuracy;
            }
            let inv = 1.0 / fc.grad_accum as f64;
            total.scale(inv);
            stats.weight *= inv;
            stats.accuracy *= inv;
            opt.step(&mut model.net_mut().params, &total)?;
            log.record(loss * inv, Some(stats));
            if is_log_step(local, budget, fc.log_every) {
                let mean_reward = if fc.reward_samples > 0 {
                    Some(ctx.mean_sampled_reward(&model, fc.reward_samples, reward_seed)?)
                } else {
                    None
                };
                log.emit(RowInfo {
                    iteration: it,
                    stage,
                    rank: plan.ranks[si],
                    active_layers: layers,
                    trainable_params: model.net().params.trainable_count(),
                    mean_reward,
                });
            }
            it += 1;
        }
    }

    lora::merge_installed(&mut model.net_mut().params)?;
    let names = model.net().params.names();
    for n in names {
        model.net_mut().params.set_trainable(&n, true)?;
    }
    let reference_intact = reference.to_checkpoint().to_bytes() == reference_bytes;
    write_run(out, cfg, &model, &log.rows)?;
    if let Some(dir) = out {
        write_stage_file(&dir.join("stages.csv"), &transitions)?;
    }
    Ok(FinetuneOutput {
        model,
        rows: log.rows,
        transitions,
        optimizer_steps: it,
        reference_intact,
        unmatched_pairs: source.unmatched(),
    })
}

fn write_stage_file(path: &Path, transitions: &[StageTransition]) -> Result<()> {
    let mut text = String::from("stage,iteration,rank,blocks,trainable_params,active_pairs,probe_max_diff\n");
    for t in transitions {
        text.push_str(&format!(
            "{},{},{},{},{},{},{:e}\n",
            t.stage,
            t.iteration,
            t.rank,
            t.blocks.join(" "),
            t.trainable_params,
            t.active_pairs,
            t.probe_max_diff
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
