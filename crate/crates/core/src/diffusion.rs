//! Discrete variance-preserving diffusion: schedule, forward process,
//! noise-prediction loss, ancestral reverse step and the one-step
//! probability-flow ODE solve used for distillation targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenoiserNet;
use crate::numerics::rng::{child_rng, normal_tensor, SeededRng};
use crate::numerics::{Graph, Tensor, Var};

/// `α_t`, `σ_t` for `t = 0..=T`; index 0 is the clean data (`α = 1, σ = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub family: ScheduleFamily,
    pub steps: usize,
    /// Distillation grid length `N`.
    pub grid: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            family: ScheduleFamily::Cosine,
            steps: 100,
            grid: 20,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<(NoiseSchedule, TimeGrid)> {
        let s = match self.family {
            ScheduleFamily::Cosine => NoiseSchedule::cosine(self.steps)?,
            ScheduleFamily::Linear => NoiseSchedule::linear(self.steps, 1e-4, 0.08)?,
        };
        let g = TimeGrid::uniform(self.steps, self.grid)?;
        Ok((s, g))
    }
}

const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008`; per-step betas are clipped
    /// at 0.999, which leaves `α_T` just above zero.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        let s = 0.008;
        let f = |t: f64| {
            ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let f0 = f(0.0);
        let mut abar = 1.0;
        let mut alphas = vec![1.0];
        let mut prev = 1.0;
        for t in 1..=steps {
            let target = f(t as f64) / f0;
            let beta = (1.0 - target / prev).clamp(0.0, MAX_BETA);
            abar *= 1.0 - beta;
            prev = target;
            alphas.push(abar.sqrt());
        }
        Self::from_alpha_table(alphas)
    }

    /// DDPM-style linear betas.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("schedule needs at least 2 steps"));
        }
        let mut abar = 1.0;
        let mut alphas = vec![1.0];
        for t in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64;
            abar *= 1.0 - beta;
            alphas.push(abar.sqrt());
        }
        Self::from_alpha_table(alphas)
    }

    /// Builds a schedule from `α_1..α_T`; `σ_t = sqrt(1 − α_t²)`.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        let mut a = vec![1.0];
        a.extend_from_slice(alphas);
        Self::from_alpha_table(a)
    }

    fn from_alpha_table(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::config("schedule needs at least one step"));
        }
        for w in alphas.windows(2) {
            if !(w[1] <= w[0]) || w[1] < 0.0 {
                return Err(Error::config("alphas must be non-increasing in [0, 1]"));
            }
        }
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(NoiseSchedule { alphas, sigmas })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// Per-row coefficient table `[n, dim]` with row `i` filled by `f(t_i)`.
    fn rows(&self, t: &[usize], dim: usize, f: impl Fn(usize) -> f64) -> Tensor {
        let mut out = Tensor::zeros(&[t.len(), dim]);
        for (i, &ti) in t.iter().enumerate() {
            out.row_mut(i).fill(f(ti));
        }
        out
    }
}

/// Increasing timesteps `t_1 < … < t_N` with `t_1 = 1` and `t_N = T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeGrid {
    times: Vec<usize>,
}

impl TimeGrid {
    pub fn uniform(steps: usize, n: usize) -> Result<Self> {
        if n < 2 || n > steps {
            return Err(Error::config(format!("grid length {n} must lie in 2..={steps}")));
        }
        let times = (0..n)
            .map(|i| 1 + ((i * (steps - 1)) as f64 / (n - 1) as f64).round() as usize)
            .collect();
        Ok(TimeGrid { times })
    }

    pub fn from_times(times: Vec<usize>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) || times[0] == 0 {
            return Err(Error::config("grid times must be positive and strictly increasing"));
        }
        Ok(TimeGrid { times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `t_n` for `1 <= n <= N`.
    pub fn time(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.times.len() {
            return Err(Error::Range(format!("grid index {n} outside 1..={}", self.times.len())));
        }
        Ok(self.times[n - 1])
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }
}

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &Tensor, t: &[usize], c: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &[usize], &Tensor, &NoiseSchedule) -> Result<Tensor>,
{
    fn predict_noise(&self, x: &Tensor, t: &[usize], c: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
        self(x, t, c, schedule)
    }
}

/// Noise-prediction model backed by a [`DenoiserNet`].
///
/// The network output `v̂` is read as a velocity, so the predicted noise is
/// `ε̂ = σ_t·x_t + α_t·v̂`. This keeps `ε̂` and the implied clean sample
/// well conditioned near `t = T`, where `α_t` vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: DenoiserNet,
}

impl Denoiser {
    pub fn new(net: DenoiserNet) -> Self {
        Denoiser { net }
    }

    pub fn predict_graph(&self, g: &mut Graph, x: Var, t: &[usize], c: Var, schedule: &NoiseSchedule) -> Result<Var> {
        for &ti in t {
            schedule.check(ti)?;
        }
        let d = g.value(x).cols();
        let v = self.net.forward(g, x, t, c)?;
        let sig = g.constant(schedule.rows(t, d, |ti| schedule.sigma(ti)));
        let alp = g.constant(schedule.rows(t, d, |ti| schedule.alpha(ti)));
        let a = g.mul(sig, x)?;
        let b = g.mul(alp, v)?;
        g.add(a, b)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x: &Tensor, t: &[usize], c: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let e = self.predict_graph(&mut g, xv, t, cv, schedule)?;
        Ok(g.value(e).clone())
    }
}

/// `x_t = α_t·x0 + σ_t·ε` for a single timestep.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    x0.check_same(eps)?;
    x0.scale(schedule.alpha(t)).axpy(schedule.sigma(t), eps)
}

/// Row-wise forward process with one timestep per row.
pub fn forward_diffuse_rows(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same(eps)?;
    if t.len() != x0.rows() {
        return Err(Error::config("one timestep per row required"));
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        schedule.check(ti)?;
        let (a, s) = (schedule.alpha(ti), schedule.sigma(ti));
        let e = eps.row(i).to_vec();
        for (o, ev) in out.row_mut(i).iter_mut().zip(e) {
            *o = a * *o + s * ev;
        }
    }
    Ok(out)
}

/// Timesteps and noise for one evaluation of the simple loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraws {
    /// `t ~ U{1..T}` and `ε ~ N(0, I)` for each of `n` rows.
    pub fn sample(rng: &mut SeededRng, n: usize, dim: usize, steps: usize) -> Self {
        let t = (0..n).map(|_| rng.random_range(1..=steps)).collect();
        let eps = normal_tensor(rng, &[n, dim], 1.0);
        NoiseDraws { t, eps }
    }
}

/// Mean over the batch of `‖ε − ε̂(x_t, t, c)‖²` for given draws.
pub fn simple_loss_with(
    pred: &impl NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if x0.rows() == 0 {
        return Err(Error::config("empty batch"));
    }
    let xt = forward_diffuse_rows(x0, &draws.t, &draws.eps, schedule)?;
    let e = pred.predict_noise(&xt, &draws.t, c, schedule)?;
    let r = draws.eps.sub(&e)?;
    Ok(r.sq_norm() / x0.rows() as f64)
}

/// Simple loss with one fresh `(t, ε)` draw per batch element.
pub fn simple_loss(
    pred: &impl NoisePredictor,
    x0: &Tensor,
    c: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<f64> {
    let draws = NoiseDraws::sample(rng, x0.rows(), x0.cols(), schedule.steps());
    simple_loss_with(pred, x0, c, &draws, schedule)
}

/// Differentiable simple loss for training `den`.
pub fn simple_loss_graph(
    g: &mut Graph,
    den: &Denoiser,
    x0: &Tensor,
    c: &Tensor,
    draws: &NoiseDraws,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let xt = forward_diffuse_rows(x0, &draws.t, &draws.eps, schedule)?;
    let xv = g.constant(xt);
    let cv = g.constant(c.clone());
    let e = den.predict_graph(g, xv, &draws.t, cv, schedule)?;
    let target = g.constant(draws.eps.clone());
    let r = g.sub(target, e)?;
    let sq = g.square(r);
    let per = g.row_sum(sq);
    Ok(g.mean(per))
}

/// Posterior mean `μ_θ(x_t, t)` and standard deviation of `p_θ(x_{t−1} | x_t)`.
pub fn reverse_moments(
    pred: &impl NoisePredictor,
    x_t: &Tensor,
    t: usize,
    c: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    schedule.check(t)?;
    let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
    let (a_p, s_p) = (schedule.alpha(t - 1), schedule.sigma(t - 1));
    if a_p <= 0.0 || s_t <= 0.0 {
        return Err(Error::Singular(format!("degenerate schedule at t = {t}")));
    }
    let a_ts = a_t / a_p;
    let var_ts = (s_t * s_t - a_ts * a_ts * s_p * s_p).max(0.0);
    let eps = pred.predict_noise(x_t, &vec![t; x_t.rows()], c, schedule)?;
    let mean = x_t.axpy(-var_ts / s_t, &eps)?.scale(1.0 / a_ts);
    let std = (var_ts * s_p * s_p / (s_t * s_t)).sqrt();
    Ok((mean, std))
}

/// One ancestral sample `x_{t−1} ~ p_θ(· | x_t)` driven by `noise`.
///
/// At `t = 1` the transition is deterministic and `noise` must be zero.
pub fn reverse_step(
    pred: &impl NoisePredictor,
    x_t: &Tensor,
    t: usize,
    c: &Tensor,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    x_t.check_same(noise)?;
    if t == 1 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("the final reverse step takes no noise".into()));
    }
    let (mean, std) = reverse_moments(pred, x_t, t, c, schedule)?;
    if std == 0.0 {
        return Ok(mean);
    }
    mean.axpy(std, noise)
}

/// Full ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
pub fn sample_ancestral(
    pred: &impl NoisePredictor,
    c: &Tensor,
    dim: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let n = c.rows();
    let mut rng = child_rng(seed, "ancestral");
    let mut x = normal_tensor(&mut rng, &[n, dim], 1.0);
    for t in (1..=schedule.steps()).rev() {
        let noise = if t > 1 {
            normal_tensor(&mut rng, &[n, dim], 1.0)
        } else {
            Tensor::zeros(&[n, dim])
        };
        x = reverse_step(pred, &x, t, c, schedule, &noise)?;
    }
    Ok(x)
}

/// Smallest `α` accepted as a solver source.
pub const MIN_SOLVER_ALPHA: f64 = 1e-8;

/// Row-wise first-order PF-ODE step from `t_from[i]` to `t_to[i]`:
/// `x̂ = α_to·x̂0 + σ_to·ε̂` with `x̂0 = (x − σ_from·ε̂)/α_from`.
pub fn ode_step_rows(
    pred: &impl NoisePredictor,
    x: &Tensor,
    t_from: &[usize],
    t_to: &[usize],
    c: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_from.len() != x.rows() || t_to.len() != x.rows() {
        return Err(Error::config("one timestep pair per row required"));
    }
    for (&a, &b) in t_from.iter().zip(t_to) {
        schedule.check(a)?;
        schedule.check(b)?;
        if schedule.alpha(a) < MIN_SOLVER_ALPHA {
            return Err(Error::Singular(format!("alpha at t = {a} is {:e}", schedule.alpha(a))));
        }
    }
    let eps = pred.predict_noise(x, t_from, c, schedule)?;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (tf, tt) = (t_from[i], t_to[i]);
        if tf == tt {
            continue;
        }
        let (af, sf) = (schedule.alpha(tf), schedule.sigma(tf));
        let (at, st) = (schedule.alpha(tt), schedule.sigma(tt));
        let e = eps.row(i).to_vec();
        for (o, ev) in out.row_mut(i).iter_mut().zip(e) {
            let x0 = (*o - sf * ev) / af;
            *o = at * x0 + st * ev;
        }
    }
    Ok(out)
}

/// One PF-ODE step from grid time `t_{n+1}` to `t_n`, `1 <= n <= N−1`.
pub fn ode_solver_step(
    pred: &impl NoisePredictor,
    x: &Tensor,
    n: usize,
    c: &Tensor,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if n == 0 || n >= grid.len() {
        return Err(Error::Range(format!("solver index {n} outside 1..={}", grid.len() - 1)));
    }
    let from = grid.time(n + 1)?;
    let to = grid.time(n)?;
    let rows = x.rows();
    ode_step_rows(pred, x, &vec![from; rows], &vec![to; rows], c, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from_seed;

    fn scalar_schedule(alpha: f64) -> NoiseSchedule {
        NoiseSchedule::from_alphas(&[alpha]).unwrap()
    }

    #[test]
    fn forward_endpoints_and_scalar_case() {
        let x0 = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let e = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        assert_eq!(forward_diffuse(&x0, 1, &e, &scalar_schedule(1.0)).unwrap(), x0);
        assert_eq!(forward_diffuse(&x0, 1, &e, &scalar_schedule(0.0)).unwrap(), e);
        let s = scalar_schedule(0.8);
        assert!((s.sigma(1) - 0.6).abs() < 1e-15);
        let y = forward_diffuse(&Tensor::scalar(2.0), 1, &Tensor::scalar(1.0), &s).unwrap();
        assert!((y.item() - 2.2).abs() < 1e-12);
        assert!(matches!(forward_diffuse(&x0, 2, &e, &s), Err(Error::Range(_))));
        assert!(forward_diffuse(&x0, 0, &e, &s).is_err());
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::cosine(100).unwrap();
        for t in 0..=100 {
            let (a, g) = (s.alpha(t), s.sigma(t));
            assert!((a * a + g * g - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(a <= s.alpha(t - 1));
            }
        }
        assert!(s.alpha(100) < 1e-3 && s.alpha(100) > MIN_SOLVER_ALPHA);
        assert!(s.sigma(1) < 0.05);
        assert!(s.sigma(100) > 0.999);
    }

    #[test]
    fn grid_shape() {
        let g = TimeGrid::uniform(100, 20).unwrap();
        assert_eq!(g.time(1).unwrap(), 1);
        assert_eq!(g.time(20).unwrap(), 100);
        assert!(g.times().windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::uniform(10, 11).is_err());
        let full = TimeGrid::uniform(10, 10).unwrap();
        assert_eq!(full.times(), &(1..=10).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn forward_is_linear() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut r = rng_from_seed(1);
        let x1 = normal_tensor(&mut r, &[4, 2], 1.0);
        let x2 = normal_tensor(&mut r, &[4, 2], 1.0);
        let e1 = normal_tensor(&mut r, &[4, 2], 1.0);
        let e2 = normal_tensor(&mut r, &[4, 2], 1.0);
        let lhs = forward_diffuse(&x1.axpy(2.0, &x2).unwrap(), 17, &e1.axpy(2.0, &e2).unwrap(), &s).unwrap();
        let rhs = forward_diffuse(&x1, 17, &e1, &s)
            .unwrap()
            .axpy(2.0, &forward_diffuse(&x2, 17, &e2, &s).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn variance_is_preserved() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut r = rng_from_seed(2);
        let n = 10_000;
        for &t in &[1usize, 25, 50, 75, 100] {
            let x0 = normal_tensor(&mut r, &[n, 1], 1.0);
            let e = normal_tensor(&mut r, &[n, 1], 1.0);
            let xt = forward_diffuse(&x0, t, &e, &s).unwrap();
            let m = xt.mean();
            let var = xt.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    fn oracle(eps: Tensor) -> impl Fn(&Tensor, &[usize], &Tensor, &NoiseSchedule) -> Result<Tensor> {
        move |_, _, _, _| Ok(eps.clone())
    }

    #[test]
    fn simple_loss_oracles() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut r = rng_from_seed(3);
        let x0 = normal_tensor(&mut r, &[6, 2], 2.0);
        let c = Tensor::zeros(&[6, 1]);
        let draws = NoiseDraws::sample(&mut r, 6, 2, 100);
        let exact = oracle(draws.eps.clone());
        assert_eq!(simple_loss_with(&exact, &x0, &c, &draws, &s).unwrap(), 0.0);

        let v = [0.5, -1.5];
        let mut shifted = draws.eps.clone();
        for i in 0..6 {
            shifted.row_mut(i)[0] += v[0];
            shifted.row_mut(i)[1] += v[1];
        }
        let biased = oracle(shifted);
        let l = simple_loss_with(&biased, &x0, &c, &draws, &s).unwrap();
        assert!((l - (0.25 + 2.25)).abs() < 1e-12);

        let zero = |x: &Tensor, _: &[usize], _: &Tensor, _: &NoiseSchedule| Ok(Tensor::zeros(x.shape()));
        let big = normal_tensor(&mut r, &[20_000, 3], 1.0);
        let cz = Tensor::zeros(&[20_000, 1]);
        let l = simple_loss(&zero, &big, &cz, &s, &mut r).unwrap();
        assert!((l - 3.0).abs() < 0.1, "loss {l}");
    }

    #[test]
    fn reverse_step_with_true_noise() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut r = rng_from_seed(4);
        let x0 = normal_tensor(&mut r, &[3, 2], 1.0);
        let e = normal_tensor(&mut r, &[3, 2], 1.0);
        let c = Tensor::zeros(&[3, 1]);
        let t = 40;
        let xt = forward_diffuse(&x0, t, &e, &s).unwrap();
        let out = reverse_step(&oracle(e.clone()), &xt, t, &c, &s, &Tensor::zeros(&[3, 2])).unwrap();
        // Same clean component as the DDIM point; the noise component is
        // shrunk by α_{t|t−1}·σ_{t−1}/σ_t relative to it.
        let ddim = forward_diffuse(&x0, t - 1, &e, &s).unwrap();
        let shrink = (s.alpha(t) / s.alpha(t - 1)) * s.sigma(t - 1) / s.sigma(t);
        let expected = x0.scale(s.alpha(t - 1)).axpy(s.sigma(t - 1) * shrink, &e).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
        assert!(out.max_abs_diff(&ddim) > 0.0);
    }

    #[test]
    fn reverse_step_edge_cases() {
        // α_{t|t−1} = 1 with σ_{t−1} = σ_t makes the transition noiseless.
        let s = NoiseSchedule::from_alphas(&[0.8, 0.8]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.1]).unwrap();
        let c = Tensor::zeros(&[1, 1]);
        let p = |x: &Tensor, _: &[usize], _: &Tensor, _: &NoiseSchedule| Ok(x.scale(0.5));
        let (mean, std) = reverse_moments(&p, &x, 2, &c, &s).unwrap();
        assert_eq!(std, 0.0);
        let noise = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        assert_eq!(reverse_step(&p, &x, 2, &c, &s, &noise).unwrap(), mean);
        assert!(matches!(
            reverse_step(&p, &x, 1, &c, &s, &noise),
            Err(Error::Contract(_))
        ));
        let run = || {
            let s = NoiseSchedule::cosine(20).unwrap();
            let c = Tensor::zeros(&[4, 1]);
            sample_ancestral(&p, &c, 2, &s, 9).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ode_step_with_true_noise_hits_forward_point() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let grid = TimeGrid::uniform(100, 20).unwrap();
        let mut r = rng_from_seed(5);
        let x0 = normal_tensor(&mut r, &[4, 2], 3.0);
        let e = normal_tensor(&mut r, &[4, 2], 1.0);
        let c = Tensor::zeros(&[4, 1]);
        for n in 1..grid.len() {
            let x = forward_diffuse(&x0, grid.time(n + 1).unwrap(), &e, &s).unwrap();
            let y = ode_solver_step(&oracle(e.clone()), &x, n, &c, &grid, &s).unwrap();
            let want = forward_diffuse(&x0, grid.time(n).unwrap(), &e, &s).unwrap();
            let tol = 1e-12 / s.alpha(grid.time(n + 1).unwrap());
            assert!(y.max_abs_diff(&want) < tol, "n={n}");
        }
        assert!(ode_solver_step(&oracle(e.clone()), &x0, 0, &c, &grid, &s).is_err());
        assert!(ode_solver_step(&oracle(e.clone()), &x0, 20, &c, &grid, &s).is_err());
    }

    #[test]
    fn ode_step_identity_and_singularity() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
        let c = Tensor::zeros(&[1, 1]);
        let p = |x: &Tensor, _: &[usize], _: &Tensor, _: &NoiseSchedule| Ok(x.scale(0.3));
        assert_eq!(ode_step_rows(&p, &x, &[5], &[5], &c, &s).unwrap(), x);
        let dead = NoiseSchedule::from_alphas(&[0.5, 0.0]).unwrap();
        assert!(matches!(
            ode_step_rows(&p, &x, &[2], &[1], &c, &dead),
            Err(Error::Singular(_))
        ));
    }

    /// For x0 ~ N(μ, s²) the PF-ODE keeps `(x − α_t μ)/sqrt(α_t² s² + σ_t²)`
    /// constant, which gives the exact solution at any time.
    #[test]
    fn ode_converges_on_gaussian_data() {
        let (mu, sd) = (1.5, 0.4);
        let score = move |x: &Tensor, t: &[usize], _: &Tensor, s: &NoiseSchedule| {
            let mut out = x.clone();
            for (i, &ti) in t.iter().enumerate() {
                let (a, g) = (s.alpha(ti), s.sigma(ti));
                let v = out.row(i)[0];
                out.row_mut(i)[0] = g * (v - a * mu) / (a * a * sd * sd + g * g);
            }
            Ok(out)
        };
        let mut errors = Vec::new();
        for &steps in &[25usize, 50, 100, 200, 400] {
            let s = NoiseSchedule::cosine(steps).unwrap();
            let (ta, tb) = (steps * 4 / 5, steps / 5);
            let x_start = 0.9;
            let marg = |t: usize| (s.alpha(t).powi(2) * sd * sd + s.sigma(t).powi(2)).sqrt();
            let z = (x_start - s.alpha(ta) * mu) / marg(ta);
            let exact = s.alpha(tb) * mu + z * marg(tb);
            let mut x = Tensor::scalar(x_start).reshape(vec![1, 1]).unwrap();
            let c = Tensor::zeros(&[1, 1]);
            for t in (tb + 1..=ta).rev() {
                x = ode_step_rows(&score, &x, &[t], &[t - 1], &c, &s).unwrap();
            }
            errors.push((x.item() - exact).abs());
        }
        for w in errors.windows(2) {
            assert!(w[1] < w[0], "{errors:?}");
        }
        // First order: doubling the resolution roughly halves the error.
        let ratio = errors[3] / errors[4];
        assert!(ratio > 1.6 && ratio < 2.5, "{errors:?}");
    }
}
