//! Checkpointed models and the sampler each variant uses.

use std::path::Path;

use crate::consistency::{consistency_forward, consistency_sample, ConsistencyFunction};
use crate::curriculum::ConditionalGenerator;
use crate::diffusion::{sample_ancestral, Denoiser, NoisePredictor, NoiseSchedule, TimeGrid};
use crate::error::{Error, Result};
use crate::nn::{DenoiserNet, NetConfig};
use crate::numerics::{Checkpoint, Tensor};

use super::config::Variant;

pub const KIND_KEY: &str = "kind";

fn put_net_meta(ck: &mut Checkpoint, net: &DenoiserNet) {
    let c = &net.config;
    for (k, v) in [
        ("data_dim", c.data_dim),
        ("cond_dim", c.cond_dim),
        ("time_dim", c.time_dim),
        ("width", c.width),
        ("hidden", c.hidden),
        ("depth", c.depth),
        ("num_steps", net.num_steps),
    ] {
        ck.meta.insert(k.into(), v.to_string());
    }
}

fn meta_usize(ck: &Checkpoint, key: &str, path: &Path) -> Result<usize> {
    ck.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("missing or invalid meta `{key}`"),
        })
}

fn net_from_checkpoint(ck: Checkpoint, path: &Path) -> Result<DenoiserNet> {
    let config = NetConfig {
        data_dim: meta_usize(&ck, "data_dim", path)?,
        cond_dim: meta_usize(&ck, "cond_dim", path)?,
        time_dim: meta_usize(&ck, "time_dim", path)?,
        width: meta_usize(&ck, "width", path)?,
        hidden: meta_usize(&ck, "hidden", path)?,
        depth: meta_usize(&ck, "depth", path)?,
    };
    let steps = meta_usize(&ck, "num_steps", path)?;
    DenoiserNet::from_params(config, steps, ck.params)
}

/// A trainable model of either variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Diffusion(Denoiser),
    Consistency(ConsistencyFunction),
}

impl Model {
    pub fn variant(&self) -> Variant {
        match self {
            Model::Diffusion(_) => Variant::Diffusion,
            Model::Consistency(_) => Variant::Consistency,
        }
    }

    pub fn net(&self) -> &DenoiserNet {
        match self {
            Model::Diffusion(d) => &d.net,
            Model::Consistency(f) => &f.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut DenoiserNet {
        match self {
            Model::Diffusion(d) => &mut d.net,
            Model::Consistency(f) => &mut f.net,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net().params.clone());
        put_net_meta(&mut ck, self.net());
        ck.meta.insert(KIND_KEY.into(), self.variant().name().into());
        if let Model::Consistency(f) = self {
            ck.meta.insert("sigma_data".into(), f.sigma_data.to_string());
            ck.meta.insert("t_min".into(), f.t_min.to_string());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        let kind = ck.meta.get(KIND_KEY).cloned().unwrap_or_default();
        match kind.as_str() {
            "diffusion" => Ok(Model::Diffusion(Denoiser::new(net_from_checkpoint(ck, path)?))),
            "consistency" => {
                let sigma_data =
                    ck.meta
                        .get("sigma_data")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Format {
                            path: path.to_path_buf(),
                            detail: "missing meta `sigma_data`".into(),
                        })?;
                let t_min = meta_usize(&ck, "t_min", path)?;
                let net = net_from_checkpoint(ck, path)?;
                Ok(Model::Consistency(ConsistencyFunction { net, sigma_data, t_min }))
            }
            other => Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unknown checkpoint kind `{other}`"),
            }),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path)
    }

    pub fn load_diffusion(path: &Path) -> Result<Denoiser> {
        match Self::load(path)? {
            Model::Diffusion(d) => Ok(d),
            Model::Consistency(_) => Err(Error::config(format!(
                "{} holds a consistency model, expected a diffusion model",
                path.display()
            ))),
        }
    }

    /// Main output of the model on fixed inputs: predicted noise or the
    /// consistency map.
    pub fn evaluate(&self, x: &Tensor, t: &[usize], c: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
        match self {
            Model::Diffusion(d) => d.predict_noise(x, t, c, schedule),
            Model::Consistency(f) => consistency_forward(f, x, t, c),
        }
    }
}

/// Schedule, grid and step count used to draw samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub consistency_steps: usize,
}

pub struct Sampler<'a> {
    pub model: &'a Model,
    pub spec: &'a SamplerSpec,
}

impl ConditionalGenerator for Sampler<'_> {
    /// Ancestral sampling for diffusion models, multistep sampling for
    /// consistency models.
    fn generate(&self, c: &Tensor, seed: u64) -> Result<Tensor> {
        let dim = self.model.net().config.data_dim;
        match self.model {
            Model::Diffusion(d) => sample_ancestral(d, c, dim, &self.spec.schedule, seed),
            Model::Consistency(f) => consistency_sample(
                f,
                c,
                dim,
                self.spec.consistency_steps,
                &self.spec.grid,
                &self.spec.schedule,
                seed,
            ),
        }
    }
}
