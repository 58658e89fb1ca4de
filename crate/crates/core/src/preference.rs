//! Preference losses: Bradley-Terry probability, implicit rewards, the
//! original DPO objective and its diffusion and consistency counterparts.
//!
//! Reference-model terms never carry gradient, so they are evaluated in
//! their own inference pass and enter the trainable graph as constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{distill_inputs, ConsistencyFunction, ConsistencyMap, DistillDraws};
use crate::diffusion::{forward_diffuse_rows, Denoiser, NoisePredictor, NoiseSchedule, TimeGrid};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, SeededRng};
use crate::numerics::{sigmoid, softplus, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
    pub c: Vec<f64>,
    /// `r(x_w, c) − r(x_l, c)`, strictly positive.
    pub gap: f64,
}

impl PreferencePair {
    pub fn new(x_w: Vec<f64>, x_l: Vec<f64>, c: Vec<f64>, gap: f64) -> Result<Self> {
        if !(gap > 0.0) {
            return Err(Error::Contract(format!("pair gap must be positive, got {gap}")));
        }
        if x_w.len() != x_l.len() {
            return Err(Error::config("winner and loser differ in dimension"));
        }
        Ok(PreferencePair { x_w, x_l, c, gap })
    }
}

/// Row-stacked pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x_w: Tensor,
    pub x_l: Tensor,
    pub c: Tensor,
    pub gap: Vec<f64>,
}

impl PairBatch {
    pub fn from_pairs(pairs: &[&PreferencePair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::config("empty pair batch"))?;
        let (d, cd) = (first.x_w.len(), first.c.len());
        let mut xw = Vec::with_capacity(pairs.len() * d);
        let mut xl = Vec::with_capacity(pairs.len() * d);
        let mut c = Vec::with_capacity(pairs.len() * cd);
        for p in pairs {
            if p.x_w.len() != d || p.x_l.len() != d || p.c.len() != cd {
                return Err(Error::config("pairs in a batch must share dimensions"));
            }
            xw.extend_from_slice(&p.x_w);
            xl.extend_from_slice(&p.x_l);
            c.extend_from_slice(&p.c);
        }
        let n = pairs.len();
        Ok(PairBatch {
            x_w: Tensor::new(vec![n, d], xw)?,
            x_l: Tensor::new(vec![n, d], xl)?,
            c: Tensor::new(vec![n, cd], c)?,
            gap: pairs.iter().map(|p| p.gap).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.gap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpoVariant {
    Plain,
    Diffusion,
    Consistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub variant: DpoVariant,
}

impl DpoConfig {
    /// Full-scale defaults: 5000 for diffusion, 200 for consistency.
    pub fn paper_default(variant: DpoVariant) -> Self {
        let beta = match variant {
            DpoVariant::Plain => 0.1,
            DpoVariant::Diffusion => 5000.0,
            DpoVariant::Consistency => 200.0,
        };
        DpoConfig { beta, variant }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

pub fn bt_probability(reward_w: f64, reward_l: f64) -> f64 {
    sigmoid(reward_w - reward_l)
}

pub fn implicit_reward(log_p_model: f64, log_p_ref: f64, beta: f64) -> f64 {
    beta * (log_p_model - log_p_ref)
}

/// `−log σ(β·(logratio_w − logratio_l))`.
pub fn dpo_loss(logratio_w: f64, logratio_l: f64, beta: f64) -> f64 {
    softplus(-beta * (logratio_w - logratio_l))
}

/// Quantities the sigmoid weight of each loss depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairState {
    Plain {
        logratio_w: f64,
        logratio_l: f64,
    },
    /// `delta = (e_w^θ − e_w^ref) − (e_l^θ − e_l^ref)` and the step count `T`.
    Diffusion {
        delta: f64,
        steps: usize,
    },
    Consistency {
        d_w: f64,
        d_l: f64,
    },
}

/// The per-pair factor that scales the loss gradient. It is 0.5 at the
/// reference, tends to 1 on misranked pairs and to 0 on well-ranked ones.
pub fn gradient_weight_diagnostic(state: PairState, beta: f64) -> f64 {
    match state {
        PairState::Plain { logratio_w, logratio_l } => {
            sigmoid(implicit_reward(logratio_l, 0.0, beta) - implicit_reward(logratio_w, 0.0, beta))
        }
        PairState::Diffusion { delta, steps } => sigmoid(beta * steps as f64 * delta),
        PairState::Consistency { d_w, d_l } => sigmoid(beta * (d_w - d_l)),
    }
}

/// Batch summary of a DPO loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoStats {
    pub loss: f64,
    /// Mean gradient-weight diagnostic.
    pub weight: f64,
    /// Fraction of pairs whose implicit reward ranks the winner strictly first.
    pub accuracy: f64,
}

fn stats_from_margins(margins: &[f64]) -> DpoStats {
    // Each margin `m` enters as softplus(m); m < 0 means the winner is preferred.
    let n = margins.len() as f64;
    DpoStats {
        loss: margins.iter().map(|&m| softplus(m)).sum::<f64>() / n,
        weight: margins.iter().map(|&m| sigmoid(m)).sum::<f64>() / n,
        accuracy: margins.iter().filter(|&&m| m < 0.0).count() as f64 / n,
    }
}

/// One shared timestep per pair and independent noise for winner and loser.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDpoDraws {
    pub t: Vec<usize>,
    pub eps_w: Tensor,
    pub eps_l: Tensor,
}

impl DiffusionDpoDraws {
    pub fn sample(rng: &mut SeededRng, n: usize, dim: usize, steps: usize) -> Self {
        let t = (0..n).map(|_| rng.random_range(1..=steps)).collect();
        let eps_w = normal_tensor(rng, &[n, dim], 1.0);
        let eps_l = normal_tensor(rng, &[n, dim], 1.0);
        DiffusionDpoDraws { t, eps_w, eps_l }
    }
}

fn noised_pair(batch: &PairBatch, draws: &DiffusionDpoDraws, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    if draws.t.len() != batch.len() {
        return Err(Error::config("one timestep per pair required"));
    }
    Ok((
        forward_diffuse_rows(&batch.x_w, &draws.t, &draws.eps_w, schedule)?,
        forward_diffuse_rows(&batch.x_l, &draws.t, &draws.eps_l, schedule)?,
    ))
}

/// Per-pair `e_w − e_l` for one model, `e = ‖ε − ε_m(x_t, t, c)‖²`.
fn error_gaps(
    model: &impl NoisePredictor,
    batch: &PairBatch,
    xt_w: &Tensor,
    xt_l: &Tensor,
    draws: &DiffusionDpoDraws,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let pw = model.predict_noise(xt_w, &draws.t, &batch.c, schedule)?;
    let pl = model.predict_noise(xt_l, &draws.t, &batch.c, schedule)?;
    let ew = draws.eps_w.sub(&pw)?.row_sq_norms();
    let el = draws.eps_l.sub(&pl)?.row_sq_norms();
    Ok(ew.iter().zip(&el).map(|(a, b)| a - b).collect())
}

/// Mean over pairs of `−log σ(−β·T·[(e_w^θ − e_w^ref) − (e_l^θ − e_l^ref)])`.
pub fn diffusion_dpo_loss(
    model: &impl NoisePredictor,
    reference: &impl NoisePredictor,
    batch: &PairBatch,
    draws: &DiffusionDpoDraws,
    schedule: &NoiseSchedule,
    beta: f64,
) -> Result<DpoStats> {
    let (xw, xl) = noised_pair(batch, draws, schedule)?;
    let gm = error_gaps(model, batch, &xw, &xl, draws, schedule)?;
    let gr = error_gaps(reference, batch, &xw, &xl, draws, schedule)?;
    let bt = beta * schedule.steps() as f64;
    let margins: Vec<f64> = gm.iter().zip(&gr).map(|(m, r)| bt * (m - r)).collect();
    Ok(stats_from_margins(&margins))
}

/// `[n, 2n]` matrix with `+1` at `(i, i)` and `−1` at `(i, n + i)`.
fn pair_difference(n: usize) -> Tensor {
    let mut s = Tensor::zeros(&[n, 2 * n]);
    for i in 0..n {
        s.set2(i, i, 1.0);
        s.set2(i, n + i, -1.0);
    }
    s
}

fn stack_times(t: &[usize]) -> Vec<usize> {
    t.iter().chain(t).copied().collect()
}

/// Differentiable diffusion DPO loss for `model`. Winner and loser rows
/// are evaluated as one stacked batch.
pub fn diffusion_dpo_loss_graph(
    g: &mut Graph,
    model: &Denoiser,
    reference: &impl NoisePredictor,
    batch: &PairBatch,
    draws: &DiffusionDpoDraws,
    schedule: &NoiseSchedule,
    beta: f64,
) -> Result<(Var, DpoStats)> {
    let n = batch.len();
    let (xw, xl) = noised_pair(batch, draws, schedule)?;
    let gr = error_gaps(reference, batch, &xw, &xl, draws, schedule)?;
    let t2 = stack_times(&draws.t);
    let x = g.constant(Tensor::vstack(&[&xw, &xl])?);
    let c = g.constant(Tensor::vstack(&[&batch.c, &batch.c])?);
    let eps = g.constant(Tensor::vstack(&[&draws.eps_w, &draws.eps_l])?);
    let pred = model.predict_graph(g, x, &t2, c, schedule)?;
    let r = g.sub(eps, pred)?;
    let sq = g.square(r);
    let e = g.row_sum(sq);
    let sel = g.constant(pair_difference(n));
    let gap = g.matmul(sel, e)?;
    let refgap = g.constant(Tensor::new(vec![n, 1], gr)?);
    let delta = g.sub(gap, refgap)?;
    let margin = g.scale(delta, beta * schedule.steps() as f64);
    let stats = stats_from_margins(g.value(margin).data());
    let sp = g.softplus(margin);
    Ok((g.mean(sp), stats))
}

/// Row-wise `d(f(x, t_from), f_ref(x̂, t_to)) − d(f_ref(x, t_from), f_ref(x̂, t_to))`.
#[allow(clippy::too_many_arguments)]
pub fn d_star(
    model: &impl ConsistencyMap,
    reference: &impl ConsistencyMap,
    x: &Tensor,
    x_hat: &Tensor,
    t_from: &[usize],
    t_to: &[usize],
    c: &Tensor,
) -> Result<Vec<f64>> {
    let target = reference.map(x_hat, t_to, c)?;
    let dm = model.map(x, t_from, c)?.sub(&target)?.row_sq_norms();
    let dr = reference.map(x, t_from, c)?.sub(&target)?.row_sq_norms();
    Ok(dm.iter().zip(&dr).map(|(a, b)| a - b).collect())
}

struct ConsistencyPairInputs {
    from: Vec<usize>,
    to: Vec<usize>,
    x_w: Tensor,
    hat_w: Tensor,
    x_l: Tensor,
    hat_l: Tensor,
}

fn consistency_pair_inputs(
    teacher: &impl NoisePredictor,
    batch: &PairBatch,
    draws: &DistillDraws,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
) -> Result<ConsistencyPairInputs> {
    if draws.n.len() != batch.len() {
        return Err(Error::config("one grid index per pair required"));
    }
    let (from, to) = draws.times(grid)?;
    let (x_w, hat_w) = distill_inputs(teacher, &batch.x_w, &batch.c, &from, &to, &draws.eps, schedule)?;
    let (x_l, hat_l) = distill_inputs(teacher, &batch.x_l, &batch.c, &from, &to, &draws.eps, schedule)?;
    Ok(ConsistencyPairInputs {
        from,
        to,
        x_w,
        hat_w,
        x_l,
        hat_l,
    })
}

/// Mean over pairs of `−log σ(−β·(d*_w − d*_l))`. Winner and loser share
/// the noise draw in `draws`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_dpo_loss(
    model: &impl ConsistencyMap,
    reference: &impl ConsistencyMap,
    teacher: &impl NoisePredictor,
    batch: &PairBatch,
    draws: &DistillDraws,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    beta: f64,
) -> Result<DpoStats> {
    let p = consistency_pair_inputs(teacher, batch, draws, grid, schedule)?;
    let dw = d_star(model, reference, &p.x_w, &p.hat_w, &p.from, &p.to, &batch.c)?;
    let dl = d_star(model, reference, &p.x_l, &p.hat_l, &p.from, &p.to, &batch.c)?;
    let margins: Vec<f64> = dw.iter().zip(&dl).map(|(a, b)| beta * (a - b)).collect();
    Ok(stats_from_margins(&margins))
}

/// Differentiable consistency DPO loss for `model`.
#[allow(clippy::too_many_arguments)]
pub fn consistency_dpo_loss_graph(
    g: &mut Graph,
    model: &ConsistencyFunction,
    reference: &impl ConsistencyMap,
    teacher: &impl NoisePredictor,
    batch: &PairBatch,
    draws: &DistillDraws,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    beta: f64,
) -> Result<(Var, DpoStats)> {
    let n = batch.len();
    let p = consistency_pair_inputs(teacher, batch, draws, grid, schedule)?;
    let c2 = Tensor::vstack(&[&batch.c, &batch.c])?;
    let x2 = Tensor::vstack(&[&p.x_w, &p.x_l])?;
    let from2 = stack_times(&p.from);
    let to2 = stack_times(&p.to);
    let target = reference.map(&Tensor::vstack(&[&p.hat_w, &p.hat_l])?, &to2, &c2)?;
    let dref = reference.map(&x2, &from2, &c2)?.sub(&target)?.row_sq_norms();

    let xv = g.constant(x2);
    let cv = g.constant(c2);
    let out = model.forward_graph(g, xv, &from2, cv)?;
    let tv = g.constant(target);
    let r = g.sub(out, tv)?;
    let sq = g.square(r);
    let dm = g.row_sum(sq);
    let dr = g.constant(Tensor::new(vec![2 * n, 1], dref)?);
    let dstar = g.sub(dm, dr)?;
    let sel = g.constant(pair_difference(n));
    let diff = g.matmul(sel, dstar)?;
    let margin = g.scale(diff, beta);
    let stats = stats_from_margins(g.value(margin).data());
    let sp = g.softplus(margin);
    Ok((g.mean(sp), stats))
}
