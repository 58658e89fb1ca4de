//! Python bindings for the `curriculum_dpo` library: configs, checkpoints,
//! the training and evaluation entry points, and the scalar loss helpers.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use curriculum_dpo::curriculum::{self, ConditionalGenerator};
use curriculum_dpo::harness::{self, Context, FinetuneMode, Variant};
use curriculum_dpo::preference::{self, PairState};
use curriculum_dpo::rewards::score_batch;
use curriculum_dpo::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Data(_) => PyValueError::new_err(msg),
        Error::Range(_) => PyIndexError::new_err(msg),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(msg),
        Error::Numerical { .. } | Error::Singular(_) => PyArithmeticError::new_err(msg),
    }
}

/// Experiment configuration; mirrors the TOML file read by `cdpo`.
#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => harness::ExperimentConfig::from_toml_str(t).map_err(py_err)?,
            None => harness::ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: harness::ExperimentConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[setter]
    fn set_variant(&mut self, v: &str) -> PyResult<()> {
        self.inner.variant = match v {
            "diffusion" => Variant::Diffusion,
            "consistency" => Variant::Consistency,
            _ => return Err(PyValueError::new_err(format!("unknown variant {v:?}"))),
        };
        Ok(())
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            FinetuneMode::Reward => "reward",
            FinetuneMode::MaskFree => "mask-free",
        }
    }

    #[setter]
    fn set_mode(&mut self, m: &str) -> PyResult<()> {
        self.inner.mode = match m {
            "reward" => FinetuneMode::Reward,
            "mask-free" => FinetuneMode::MaskFree,
            _ => return Err(PyValueError::new_err(format!("unknown mode {m:?}"))),
        };
        Ok(())
    }

    /// DPO β in effect, including the variant default.
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }

    fn stage_budgets(&self) -> PyResult<Vec<usize>> {
        self.inner.stage_budgets().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(seed={}, variant={:?}, mode={:?})",
            self.inner.seed,
            self.variant(),
            self.mode()
        )
    }
}

/// A diffusion or consistency model checkpoint.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: harness::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: harness::Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().name()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.net().params.total_count()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_checkpoint().to_bytes()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={:?}, parameters={})",
            self.variant(),
            self.parameter_count()
        )
    }
}

fn teacher_of(teacher: Option<&PyModel>) -> PyResult<Option<curriculum_dpo::diffusion::Denoiser>> {
    match teacher.map(|t| &t.inner) {
        None => Ok(None),
        Some(harness::Model::Diffusion(d)) => Ok(Some(d.clone())),
        Some(harness::Model::Consistency(_)) => Err(PyValueError::new_err("teacher must be a diffusion model")),
    }
}

/// Trains a diffusion model. Returns `(model, losses)`.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn pretrain(py: Python<'_>, config: &PyConfig, out: Option<PathBuf>) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.inner.clone();
    let r = py.detach(|| harness::pretrain(&cfg, out.as_deref())).map_err(py_err)?;
    Ok((PyModel { inner: r.model }, r.losses))
}

/// Distills a consistency model from a diffusion teacher. Returns `(model, losses)`.
#[pyfunction]
#[pyo3(signature = (config, teacher, out = None))]
fn distill(
    py: Python<'_>,
    config: &PyConfig,
    teacher: &PyModel,
    out: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = config.inner.clone();
    let t = teacher_of(Some(teacher))?.expect("teacher given");
    let r = py
        .detach(|| harness::distill(&cfg, &t, out.as_deref()))
        .map_err(py_err)?;
    Ok((PyModel { inner: r.model }, r.losses))
}

/// Preference fine-tuning. Returns `(model, info)` where `info` holds the
/// logged losses, stage transitions and bookkeeping counters.
#[pyfunction]
#[pyo3(signature = (config, base, teacher = None, out = None, plain = false))]
fn finetune<'py>(
    py: Python<'py>,
    config: &PyConfig,
    base: &PyModel,
    teacher: Option<&PyModel>,
    out: Option<PathBuf>,
    plain: bool,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let cfg = config.inner.clone();
    let t = teacher_of(teacher)?;
    let b = base.inner.clone();
    let r = py
        .detach(|| {
            if plain {
                harness::finetune_plain(&cfg, &b, t.as_ref(), out.as_deref())
            } else {
                harness::finetune_curriculum(&cfg, &b, t.as_ref(), out.as_deref())
            }
        })
        .map_err(py_err)?;
    let info = PyDict::new(py);
    info.set_item("optimizer_steps", r.optimizer_steps)?;
    info.set_item("reference_intact", r.reference_intact)?;
    info.set_item("unmatched_pairs", r.unmatched_pairs)?;
    info.set_item("iterations", r.rows.iter().map(|x| x.iteration).collect::<Vec<_>>())?;
    info.set_item("losses", r.rows.iter().map(|x| x.loss).collect::<Vec<_>>())?;
    info.set_item("mean_rewards", r.rows.iter().map(|x| x.mean_reward).collect::<Vec<_>>())?;
    let stages = r
        .transitions
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("stage", s.stage)?;
            d.set_item("iteration", s.iteration)?;
            d.set_item("rank", s.rank)?;
            d.set_item("blocks", s.blocks.clone())?;
            d.set_item("trainable_params", s.trainable_params)?;
            d.set_item("probe_max_diff", s.probe_max_diff)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    info.set_item("stages", stages)?;
    Ok((PyModel { inner: r.model }, info))
}

/// Points, condition ids and rewards of a sample batch.
type Scored = (Vec<Vec<f64>>, Vec<usize>, Vec<f64>);

/// Draws `n` samples with conditions cycling through the components.
/// Returns `(points, condition_ids, rewards)`.
#[pyfunction]
#[pyo3(signature = (config, model, n, seed = 0))]
fn sample(py: Python<'_>, config: &PyConfig, model: &PyModel, n: usize, seed: u64) -> PyResult<Scored> {
    let cfg = config.inner.clone();
    let m = model.inner.clone();
    py.detach(move || {
        let ctx = Context::new(&cfg)?;
        let (ids, c) = ctx.cycled_conditions(n)?;
        let x = ctx.sampler(&m).generate(&c, seed)?;
        let r = score_batch(&ctx.reward, &x, &ids)?;
        let pts = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
        Ok((pts, ids, r))
    })
    .map_err(py_err)
}

/// Reward summary, plus paired win statistics when `reference` is given.
#[pyfunction]
#[pyo3(signature = (config, model, reference = None, n = 512, seed = None))]
fn evaluate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    model: &PyModel,
    reference: Option<&PyModel>,
    n: usize,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let m = model.inner.clone();
    let r = reference.map(|r| r.inner.clone());
    let s = py
        .detach(|| {
            let ctx = Context::new(&cfg)?;
            harness::evaluate(&ctx, &m, r.as_ref(), n, seed.unwrap_or(cfg.eval.seed))
        })
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("n_samples", s.n_samples)?;
    d.set_item("mean_reward", s.mean_reward)?;
    d.set_item("std_reward", s.std_reward)?;
    if let Some(w) = s.versus_reference {
        d.set_item("wins", w.wins)?;
        d.set_item("ties", w.ties)?;
        d.set_item("losses", w.losses)?;
        d.set_item("win_rate", w.win_rate)?;
        d.set_item("tie_split_win_rate", w.tie_split_win_rate)?;
        d.set_item("reference_mean_reward", w.reference_mean_reward)?;
    }
    Ok(d)
}

/// Writes `curves/*.csv` for a run directory and returns the written paths.
#[pyfunction]
fn emit_curves(run_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    harness::emit_curves(&run_dir).map_err(py_err)
}

/// `−log σ(β·(logratio_w − logratio_l))`.
#[pyfunction]
fn dpo_loss(logratio_w: f64, logratio_l: f64, beta: f64) -> f64 {
    preference::dpo_loss(logratio_w, logratio_l, beta)
}

#[pyfunction]
fn bt_probability(reward_w: f64, reward_l: f64) -> f64 {
    preference::bt_probability(reward_w, reward_l)
}

/// Gradient weight of one pair. `kind` is `plain` (`a`, `b` are the log
/// ratios), `diffusion` (`a` is the error-gap delta, `b` the step count) or
/// `consistency` (`a`, `b` are `d_w`, `d_l`).
#[pyfunction]
fn gradient_weight(kind: &str, a: f64, b: f64, beta: f64) -> PyResult<f64> {
    let state = match kind {
        "plain" => PairState::Plain {
            logratio_w: a,
            logratio_l: b,
        },
        "diffusion" => PairState::Diffusion {
            delta: a,
            steps: b as usize,
        },
        "consistency" => PairState::Consistency { d_w: a, d_l: b },
        _ => return Err(PyValueError::new_err(format!("unknown loss kind {kind:?}"))),
    };
    Ok(preference::gradient_weight_diagnostic(state, beta))
}

/// Rank-difference intervals `(lower, upper)` for `m` samples and `b` batches.
#[pyfunction]
fn batch_limits(m: usize, b: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let l = curriculum::batch_limits(m, b).map_err(py_err)?;
    Ok((l.lower, l.upper))
}

/// `(winner index, loser index, reward gap)`.
type IndexPair = (usize, usize, f64);

/// Ranked pairs of one condition partitioned into difficulty batches.
/// Returns one list of pairs per batch, easiest first.
#[pyfunction]
#[pyo3(signature = (rewards, batches, min_gap = 0.0))]
fn partition_rewards(rewards: Vec<f64>, batches: usize, min_gap: f64) -> PyResult<Vec<Vec<IndexPair>>> {
    let ranked = curriculum::RankedSet::from_rewards(0, &rewards).map_err(py_err)?;
    let pairs = curriculum::build_pairs(&ranked, min_gap);
    let limits = curriculum::batch_limits(rewards.len(), batches).map_err(py_err)?;
    let part = curriculum::partition_pairs(&pairs, &limits, curriculum::PairMetric::RankDifference);
    Ok(part
        .batches
        .iter()
        .map(|b| {
            b.iter()
                .map(|&k| (ranked.order[pairs[k].i], ranked.order[pairs[k].j], pairs[k].gap))
                .collect()
        })
        .collect())
}

#[pyfunction]
fn mask_embedding(c: Vec<f64>, ratio: f64, seed: u64) -> PyResult<Vec<f64>> {
    curriculum::mask_embedding(&c, ratio, seed).map_err(py_err)
}

#[pyfunction]
fn rank_schedule(r_start: usize, r_end: usize, delta: f64, stages: usize) -> PyResult<Vec<usize>> {
    curriculum_dpo::lora::rank_schedule(r_start, r_end, delta, stages).map_err(py_err)
}

#[pymodule(name = "curriculum_dpo")]
fn curriculum_dpo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(emit_curves, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_weight, m)?)?;
    m.add_function(wrap_pyfunction!(batch_limits, m)?)?;
    m.add_function(wrap_pyfunction!(partition_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(mask_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(rank_schedule, m)?)?;
    Ok(())
}
