//! The toy denoiser: a stem, residual MLP blocks arranged as down/mid/up
//! stages with additive skip connections, and a linear head.
//!
//! Every linear map reads its weights from a [`ParamStore`] by name. When
//! the store also holds `<layer>.lora_a` / `<layer>.lora_c` entries the layer
//! adds the low-rank update on top of its frozen base weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{child_rng, uniform_tensor};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub width: usize,
    pub hidden: usize,
    /// Number of down blocks; the net has as many up blocks plus one mid block.
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            data_dim: 2,
            cond_dim: 8,
            time_dim: 16,
            width: 32,
            hidden: 32,
            depth: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.cond_dim == 0 || self.width == 0 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time_dim must be an even number >= 2"));
        }
        Ok(())
    }
}

/// Name of the `i`-th down block.
pub fn down_block(i: usize) -> String {
    format!("down{i}")
}

/// Name of the `i`-th up block; `up0` pairs with the innermost down block.
pub fn up_block(i: usize) -> String {
    format!("up{i}")
}

pub const MID_BLOCK: &str = "mid";

/// Linear maps inside every block, in evaluation order.
pub const BLOCK_LINEARS: [&str; 5] = ["skip", "fc1", "time", "cond", "fc2"];

/// Sinusoidal features of integer timesteps, shape `[t.len(), dim]`.
pub fn time_embedding(t: &[usize], num_steps: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len().max(1), dim]);
    for (r, &ti) in t.iter().enumerate() {
        let s = ti as f64 / num_steps as f64 * 1000.0;
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            row[i] = (s * freq).sin();
            row[half + i] = (s * freq).cos();
        }
    }
    out
}

/// Dense layer `y = x·Wᵀ + b (+ scale·x·Aᵀ·Cᵀ)` bound to weights named
/// `<id>.weight`, `<id>.bias` and, when adapted, `<id>.lora_*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub id: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(id: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            id: id.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.id)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.id)
    }

    fn init(&self, store: &mut ParamStore, seed: u64, identity: bool) {
        let w = if identity && self.in_dim == self.out_dim {
            Tensor::identity(self.in_dim)
        } else {
            let bound = 1.0 / (self.in_dim as f64).sqrt();
            uniform_tensor(&mut child_rng(seed, &self.id), &[self.out_dim, self.in_dim], bound)
        };
        store.insert(self.weight_name(), w, true);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]), true);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let xd = g.value(x).cols();
        if xd != self.in_dim {
            return Err(Error::config(format!(
                "layer `{}` expects {} inputs, got {xd}",
                self.id, self.in_dim
            )));
        }
        let w = g.param(store, &self.weight_name())?;
        let mut y = g.matmul_nt(x, w)?;
        if self.bias {
            let b = g.param(store, &self.bias_name())?;
            y = g.add_row(y, b)?;
        }
        let a_name = crate::lora::a_name(&self.id);
        if store.contains(&a_name) {
            let a = g.param(store, &a_name)?;
            let c = g.param(store, &crate::lora::c_name(&self.id))?;
            let scale = store.value(&crate::lora::scale_name(&self.id))?.item();
            let h = g.matmul_nt(x, a)?;
            let d = g.matmul_nt(h, c)?;
            let d = g.scale(d, scale);
            y = g.add(y, d)?;
        }
        Ok(y)
    }
}

/// Residual MLP block: `skip(x) + fc2(silu(fc1(x) + time(temb) + cond(cemb)))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpBlock {
    pub name: String,
    pub skip: Linear,
    pub fc1: Linear,
    pub time: Linear,
    pub cond: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(name: &str, width: usize, hidden: usize, time_dim: usize, cond_dim: usize) -> Self {
        let id = |l: &str| format!("{name}.{l}");
        MlpBlock {
            name: name.to_string(),
            skip: Linear::new(id("skip"), width, width, false),
            fc1: Linear::new(id("fc1"), width, hidden, true),
            time: Linear::new(id("time"), time_dim, hidden, false),
            cond: Linear::new(id("cond"), cond_dim, hidden, false),
            fc2: Linear::new(id("fc2"), hidden, width, true),
        }
    }

    pub fn linears(&self) -> [&Linear; 5] {
        [&self.skip, &self.fc1, &self.time, &self.cond, &self.fc2]
    }

    fn init(&self, store: &mut ParamStore, seed: u64) {
        self.skip.init(store, seed, true);
        self.fc1.init(store, seed, false);
        self.time.init(store, seed, false);
        self.cond.init(store, seed, false);
        self.fc2.init(store, seed, false);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Var, cemb: Var) -> Result<Var> {
        let n = g.value(x).rows();
        if g.value(temb).rows() != n || g.value(cemb).rows() != n {
            return Err(Error::config(format!(
                "block `{}`: embedding batch does not match input batch {n}",
                self.name
            )));
        }
        let s = self.skip.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, x)?;
        let ht = self.time.forward(g, store, temb)?;
        let hc = self.cond.forward(g, store, cemb)?;
        let h = g.add(h, ht)?;
        let h = g.add(h, hc)?;
        let h = g.silu(h);
        let r = self.fc2.forward(g, store, h)?;
        g.add(s, r)
    }
}

/// Inference helper: evaluates one block on plain tensors.
pub fn mlp_block_forward(
    store: &ParamStore,
    block: &MlpBlock,
    input: &Tensor,
    time_embedding: &Tensor,
    condition_embedding: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let x = g.constant(input.clone());
    let t = g.constant(time_embedding.clone());
    let c = g.constant(condition_embedding.clone());
    let y = block.forward(&mut g, store, x, t, c)?;
    Ok(g.value(y).clone())
}

/// Block-structured network producing one raw output per data dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub config: NetConfig,
    pub num_steps: usize,
    pub params: ParamStore,
}

impl DenoiserNet {
    pub fn new(config: NetConfig, num_steps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = DenoiserNet {
            config,
            num_steps,
            params: ParamStore::new(),
        };
        let mut store = ParamStore::new();
        net.stem().init(&mut store, seed, false);
        for b in net.blocks() {
            b.init(&mut store, seed);
        }
        net.head().init(&mut store, seed, false);
        net.params = store;
        Ok(net)
    }

    /// Rebuilds a network around an existing parameter store.
    pub fn from_params(config: NetConfig, num_steps: usize, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let net = DenoiserNet {
            config,
            num_steps,
            params,
        };
        for name in net.base_param_names() {
            let expected = net.expected_shape(&name);
            match net.params.get(&name) {
                Some(p) if Some(p.value.shape().to_vec()) == expected => {}
                Some(p) => {
                    return Err(Error::config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.value.shape(),
                        expected
                    )))
                }
                None => return Err(Error::config(format!("missing parameter `{name}`"))),
            }
        }
        Ok(net)
    }

    fn stem(&self) -> Linear {
        Linear::new("stem", self.config.data_dim, self.config.width, true)
    }

    fn head(&self) -> Linear {
        Linear::new("head", self.config.width, self.config.data_dim, true)
    }

    pub fn down_blocks(&self) -> Vec<MlpBlock> {
        (0..self.config.depth).map(|i| self.block(&down_block(i))).collect()
    }

    pub fn up_blocks(&self) -> Vec<MlpBlock> {
        (0..self.config.depth).map(|i| self.block(&up_block(i))).collect()
    }

    pub fn block(&self, name: &str) -> MlpBlock {
        let c = &self.config;
        MlpBlock::new(name, c.width, c.hidden, c.time_dim, c.cond_dim)
    }

    /// All blocks: down blocks outermost-first, the mid block, then up blocks
    /// innermost-first.
    pub fn blocks(&self) -> Vec<MlpBlock> {
        let mut v = self.down_blocks();
        v.push(self.block(MID_BLOCK));
        v.extend(self.up_blocks());
        v
    }

    /// Every linear map in `block`, i.e. the candidate adapter sites.
    pub fn block_layers(&self, block: &str) -> Vec<Linear> {
        self.block(block).linears().into_iter().cloned().collect()
    }

    pub fn layer(&self, id: &str) -> Option<Linear> {
        let (block, _) = id.split_once('.')?;
        self.blocks()
            .into_iter()
            .find(|b| b.name == block)?
            .linears()
            .into_iter()
            .find(|l| l.id == id)
            .cloned()
    }

    fn all_linears(&self) -> Vec<Linear> {
        let mut v = vec![self.stem()];
        for b in self.blocks() {
            v.extend(b.linears().into_iter().cloned());
        }
        v.push(self.head());
        v
    }

    fn base_param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in self.all_linears() {
            v.push(l.weight_name());
            if l.bias {
                v.push(l.bias_name());
            }
        }
        v
    }

    fn expected_shape(&self, name: &str) -> Option<Vec<usize>> {
        self.all_linears().into_iter().find_map(|l| {
            if name == l.weight_name() {
                Some(vec![l.out_dim, l.in_dim])
            } else if l.bias && name == l.bias_name() {
                Some(vec![l.out_dim])
            } else {
                None
            }
        })
    }

    /// Raw network output for inputs `x` (`[n, data_dim]`), integer timesteps
    /// `t` and condition embeddings `c` (`[n, cond_dim]`).
    pub fn forward(&self, g: &mut Graph, x: Var, t: &[usize], c: Var) -> Result<Var> {
        let cfg = &self.config;
        let n = g.value(x).rows();
        if g.value(x).cols() != cfg.data_dim {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                g.value(x).cols(),
                cfg.data_dim
            )));
        }
        if g.value(c).cols() != cfg.cond_dim || g.value(c).rows() != n {
            return Err(Error::config(format!(
                "condition shape {:?} does not match batch {n} x {}",
                g.value(c).shape(),
                cfg.cond_dim
            )));
        }
        if t.len() != n {
            return Err(Error::config("one timestep per batch row required"));
        }
        let store = &self.params;
        let temb = g.constant(time_embedding(t, self.num_steps, cfg.time_dim));
        let mut h = self.stem().forward(g, store, x)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for b in self.down_blocks() {
            h = b.forward(g, store, h, temb, c)?;
            skips.push(h);
        }
        h = self.block(MID_BLOCK).forward(g, store, h, temb, c)?;
        for b in self.up_blocks() {
            let s = skips.pop().expect("one skip per up block");
            let hin = g.add(h, s)?;
            h = b.forward(g, store, hin, temb, c)?;
        }
        let h = g.silu(h);
        self.head().forward(g, store, h)
    }

    pub fn forward_tensor(&self, x: &Tensor, t: &[usize], c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let y = self.forward(&mut g, xv, t, cv)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, rng_from_seed};

    fn block_store(block: &MlpBlock, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        block.init(&mut s, seed);
        s
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let b = MlpBlock::new("b", 4, 6, 2, 3);
        let mut s = block_store(&b, 1);
        for (_, p) in s.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut r = rng_from_seed(3);
        let x = normal_tensor(&mut r, &[5, 4], 1.0);
        let t = normal_tensor(&mut r, &[5, 2], 1.0);
        let c = normal_tensor(&mut r, &[5, 3], 1.0);
        let y = mlp_block_forward(&s, &b, &x, &t, &c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_skip_with_zero_branch_is_identity() {
        let b = MlpBlock::new("b", 4, 6, 2, 3);
        let mut s = block_store(&b, 1);
        let fc2 = b.fc2.weight_name();
        s.get_mut(&fc2).unwrap().value = Tensor::zeros(&[4, 6]);
        let mut r = rng_from_seed(5);
        let x = normal_tensor(&mut r, &[3, 4], 1.0);
        let t = normal_tensor(&mut r, &[3, 2], 1.0);
        let c = normal_tensor(&mut r, &[3, 3], 1.0);
        let y = mlp_block_forward(&s, &b, &x, &t, &c).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn block_forward_is_deterministic() {
        let b = MlpBlock::new("b", 4, 6, 2, 3);
        let run = || {
            let s = block_store(&b, 9);
            let mut r = rng_from_seed(11);
            let x = normal_tensor(&mut r, &[3, 4], 1.0);
            let t = normal_tensor(&mut r, &[3, 2], 1.0);
            let c = normal_tensor(&mut r, &[3, 3], 1.0);
            mlp_block_forward(&s, &b, &x, &t, &c).unwrap()
        };
        let (a, b2) = (run(), run());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b2));
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let b = MlpBlock::new("b", 4, 6, 2, 3);
        let s = block_store(&b, 1);
        let x = Tensor::zeros(&[3, 4]);
        let bad_t = Tensor::zeros(&[3, 5]);
        let c = Tensor::zeros(&[3, 3]);
        assert!(matches!(
            mlp_block_forward(&s, &b, &x, &bad_t, &c),
            Err(Error::Config(_))
        ));
        let short_c = Tensor::zeros(&[2, 3]);
        assert!(mlp_block_forward(&s, &b, &x, &Tensor::zeros(&[3, 2]), &short_c).is_err());
    }

    #[test]
    fn net_round_trips_through_params() {
        let net = DenoiserNet::new(NetConfig::default(), 100, 4).unwrap();
        let again = DenoiserNet::from_params(net.config, 100, net.params.clone()).unwrap();
        assert_eq!(net, again);
        let mut broken = net.params.clone();
        broken.remove("head.bias");
        assert!(DenoiserNet::from_params(net.config, 100, broken).is_err());
    }

    #[test]
    fn net_output_shape() {
        let net = DenoiserNet::new(NetConfig::default(), 100, 4).unwrap();
        let x = Tensor::zeros(&[3, 2]);
        let c = Tensor::zeros(&[3, 8]);
        let y = net.forward_tensor(&x, &[1, 50, 100], &c).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert!(net.forward_tensor(&x, &[1, 2], &c).is_err());
    }
}
