//! Consistency models on top of the denoiser backbone: boundary
//! parameterization, distillation loss against a teacher's one-step ODE
//! solve, and multistep sampling.

use rand::Rng;

use crate::diffusion::{forward_diffuse_rows, ode_step_rows, NoisePredictor, NoiseSchedule, TimeGrid};
use crate::error::{Error, Result};
use crate::nn::DenoiserNet;
use crate::numerics::rng::{child_rng, normal_tensor, SeededRng};
use crate::numerics::{Graph, Tensor, Var};

pub const SIGMA_DATA: f64 = 0.5;

/// A map from `(x_t, t, c)` to an estimate of the trajectory origin.
pub trait ConsistencyMap {
    fn map(&self, x: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor>;
}

/// `f_φ(x, t, c) = c_skip(t)·x + c_out(t)·F_φ(x, t, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyFunction {
    pub net: DenoiserNet,
    pub sigma_data: f64,
    /// Boundary time `t_1`, where `f` is the identity.
    pub t_min: usize,
}

impl ConsistencyFunction {
    pub fn new(net: DenoiserNet, grid: &TimeGrid) -> Self {
        ConsistencyFunction {
            net,
            sigma_data: SIGMA_DATA,
            t_min: grid.times()[0],
        }
    }

    pub fn c_skip(&self, t: usize) -> f64 {
        let d = t as f64 - self.t_min as f64;
        let s2 = self.sigma_data * self.sigma_data;
        s2 / (d * d + s2)
    }

    pub fn c_out(&self, t: usize) -> f64 {
        let d = t as f64 - self.t_min as f64;
        let tf = t as f64;
        self.sigma_data * d / (tf * tf + self.sigma_data * self.sigma_data).sqrt()
    }

    fn coefficient_rows(&self, t: &[usize], dim: usize, f: impl Fn(usize) -> f64) -> Tensor {
        let mut out = Tensor::zeros(&[t.len(), dim]);
        for (i, &ti) in t.iter().enumerate() {
            out.row_mut(i).fill(f(ti));
        }
        out
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var, t: &[usize], c: Var) -> Result<Var> {
        let d = g.value(x).cols();
        let raw = self.net.forward(g, x, t, c)?;
        let cs = g.constant(self.coefficient_rows(t, d, |ti| self.c_skip(ti)));
        let co = g.constant(self.coefficient_rows(t, d, |ti| self.c_out(ti)));
        let a = g.mul(cs, x)?;
        let b = g.mul(co, raw)?;
        g.add(a, b)
    }
}

impl ConsistencyMap for ConsistencyFunction {
    fn map(&self, x: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor> {
        consistency_forward(self, x, t, c)
    }
}

pub fn consistency_forward(f: &ConsistencyFunction, x: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let cv = g.constant(c.clone());
    let y = f.forward_graph(&mut g, xv, t, cv)?;
    Ok(g.value(y).clone())
}

/// Grid indices `n` (1-based, `1 <= n <= N−1`) and the shared noise for one
/// distillation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillDraws {
    pub n: Vec<usize>,
    pub eps: Tensor,
}

impl DistillDraws {
    pub fn sample(rng: &mut SeededRng, rows: usize, dim: usize, grid: &TimeGrid) -> Self {
        let n = (0..rows).map(|_| rng.random_range(1..grid.len())).collect();
        let eps = normal_tensor(rng, &[rows, dim], 1.0);
        DistillDraws { n, eps }
    }

    /// `(t_{n+1}, t_n)` per row.
    pub fn times(&self, grid: &TimeGrid) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut from = Vec::with_capacity(self.n.len());
        let mut to = Vec::with_capacity(self.n.len());
        for &n in &self.n {
            if n == 0 || n >= grid.len() {
                return Err(Error::Range(format!("grid index {n} outside 1..={}", grid.len() - 1)));
            }
            from.push(grid.time(n + 1)?);
            to.push(grid.time(n)?);
        }
        Ok((from, to))
    }
}

/// Noised inputs `x_{t_{n+1}}` and teacher targets `x̂_{t_n}` for a batch.
pub fn distill_inputs(
    teacher: &impl NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    t_from: &[usize],
    t_to: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, Tensor)> {
    let x_next = forward_diffuse_rows(x0, t_from, eps, schedule)?;
    let x_hat = ode_step_rows(teacher, &x_next, t_from, t_to, c, schedule)?;
    Ok((x_next, x_hat))
}

/// Distillation loss for explicit timestep pairs, with arbitrary student and
/// target maps. Mean over the batch of the squared L2 distance.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss_rows(
    f: &impl ConsistencyMap,
    target: &impl ConsistencyMap,
    teacher: &impl NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    t_from: &[usize],
    t_to: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if x0.rows() == 0 {
        return Err(Error::config("empty batch"));
    }
    let (x_next, x_hat) = distill_inputs(teacher, x0, c, t_from, t_to, eps, schedule)?;
    let a = f.map(&x_next, t_from, c)?;
    let b = target.map(&x_hat, t_to, c)?;
    Ok(a.sub(&b)?.sq_norm() / x0.rows() as f64)
}

/// Value of the distillation loss where the target is the student itself
/// under stop-gradient.
pub fn consistency_distill_loss(
    f: &ConsistencyFunction,
    teacher: &impl NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    draws: &DistillDraws,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let (from, to) = draws.times(grid)?;
    distill_loss_rows(f, f, teacher, x0, c, &from, &to, &draws.eps, schedule)
}

/// Differentiable distillation loss; the target branch is a constant.
#[allow(clippy::too_many_arguments)]
pub fn consistency_distill_loss_graph(
    g: &mut Graph,
    f: &ConsistencyFunction,
    teacher: &impl NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    draws: &DistillDraws,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let (from, to) = draws.times(grid)?;
    let (x_next, x_hat) = distill_inputs(teacher, x0, c, &from, &to, &draws.eps, schedule)?;
    let target = g.constant(f.map(&x_hat, &to, c)?);
    let xv = g.constant(x_next);
    let cv = g.constant(c.clone());
    let out = f.forward_graph(g, xv, &from, cv)?;
    let r = g.sub(out, target)?;
    let sq = g.square(r);
    let per = g.row_sum(sq);
    Ok(g.mean(per))
}

/// Grid positions (0-based) visited by an `steps`-step sampler.
pub fn sampling_indices(grid_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > grid_len {
        return Err(Error::Range(format!("sampling steps {steps} outside 1..={grid_len}")));
    }
    Ok((0..steps).map(|i| grid_len - 1 - i * grid_len / steps).collect())
}

/// Multistep consistency sampling: start from `x ~ N(0, I)` at `t_N`, map to
/// a clean estimate, re-noise to the next visited grid time, repeat.
pub fn consistency_sample(
    f: &impl ConsistencyMap,
    c: &Tensor,
    dim: usize,
    steps: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let idx = sampling_indices(grid.len(), steps)?;
    let n = c.rows();
    let mut rng = child_rng(seed, "consistency-sample");
    let x = normal_tensor(&mut rng, &[n, dim], 1.0);
    let t0 = grid.times()[idx[0]];
    let mut x0 = f.map(&x, &vec![t0; n], c)?;
    for &i in &idx[1..] {
        let t = grid.times()[i];
        let z = normal_tensor(&mut rng, &[n, dim], 1.0);
        let xt = x0.scale(schedule.alpha(t)).axpy(schedule.sigma(t), &z)?;
        x0 = f.map(&xt, &vec![t; n], c)?;
    }
    Ok(x0)
}
