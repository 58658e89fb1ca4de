//! Low-rank adapters: creation, rank growth with weight transfer, the
//! block-level layer schedule and the final merge into base weights.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::nn::{down_block, up_block, MID_BLOCK};
use crate::numerics::rng::{child_rng, normal_tensor};
use crate::numerics::{silu, ParamStore, Tensor};

/// Standard deviation of freshly drawn `A` entries.
pub const INIT_STD: f64 = 0.02;

pub fn a_name(layer: &str) -> String {
    format!("{layer}.lora_a")
}

pub fn c_name(layer: &str) -> String {
    format!("{layer}.lora_c")
}

pub fn scale_name(layer: &str) -> String {
    format!("{layer}.lora_scale")
}

/// `ΔW = scale · C · A` for one layer with weight `W ∈ R^{m×h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer_id: String,
    /// `r × h`
    pub a: Tensor,
    /// `m × r`
    pub c: Tensor,
    pub scale: f64,
}

fn check_rank(m: usize, h: usize, r: usize) -> Result<()> {
    if r == 0 || 2 * r > m.min(h) {
        return Err(Error::config(format!("rank {r} violates 1 <= r <= min({m}, {h})/2")));
    }
    Ok(())
}

/// `r_1 = r_start`, `r_{k+1} = min(r_end, r_k · δ)`.
pub fn rank_schedule(r_start: usize, r_end: usize, delta: f64, stages: usize) -> Result<Vec<usize>> {
    if r_start > r_end {
        return Err(Error::config(format!("r_start {r_start} exceeds r_end {r_end}")));
    }
    if r_start == 0 {
        return Err(Error::config("r_start must be positive"));
    }
    if delta.is_nan() || delta <= 1.0 {
        return Err(Error::config(format!("rank growth rate {delta} must exceed 1")));
    }
    if stages == 0 {
        return Err(Error::config("at least one stage required"));
    }
    let mut ranks = Vec::with_capacity(stages);
    let mut r = r_start;
    for _ in 0..stages {
        ranks.push(r);
        r = r_end.min(((r as f64) * delta).round() as usize);
    }
    Ok(ranks)
}

/// Fresh adapter with `A ~ N(0, INIT_STD²)` and `C = 0`.
pub fn init_adapter(layer_id: &str, shape: (usize, usize), rank: usize, seed: u64) -> Result<LoraAdapter> {
    let (m, h) = shape;
    check_rank(m, h, rank)?;
    let mut rng = child_rng(seed, &format!("lora/{layer_id}/{rank}"));
    Ok(LoraAdapter {
        layer_id: layer_id.to_string(),
        a: normal_tensor(&mut rng, &[rank, h], INIT_STD),
        c: Tensor::zeros(&[m, rank]),
        scale: 1.0,
    })
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `(m, h)` of the adapted weight.
    pub fn layer_shape(&self) -> (usize, usize) {
        (self.c.shape()[0], self.a.shape()[1])
    }

    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.c.matmul(&self.a)?.scale(self.scale))
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.c.len()
    }

    /// Writes the adapter into `store` under the layer's `lora_*` names.
    pub fn install(&self, store: &mut ParamStore, trainable: bool) {
        store.insert(a_name(&self.layer_id), self.a.clone(), trainable);
        store.insert(c_name(&self.layer_id), self.c.clone(), trainable);
        store.insert(scale_name(&self.layer_id), Tensor::scalar(self.scale), false);
    }

    pub fn extract(store: &ParamStore, layer_id: &str) -> Option<LoraAdapter> {
        let a = store.get(&a_name(layer_id))?.value.clone();
        let c = store.get(&c_name(layer_id))?.value.clone();
        let scale = store.get(&scale_name(layer_id)).map_or(1.0, |p| p.value.item());
        Some(LoraAdapter {
            layer_id: layer_id.to_string(),
            a,
            c,
            scale,
        })
    }

    pub fn remove_from(store: &mut ParamStore, layer_id: &str) {
        store.remove(&a_name(layer_id));
        store.remove(&c_name(layer_id));
        store.remove(&scale_name(layer_id));
    }
}

/// Enlarges an adapter to `new_rank`, copying the learned blocks.
///
/// The first `r_old` rows of `A` and columns of `C` are the old values; the
/// remaining rows of `A` are fresh draws and the remaining columns of `C`
/// are zero, so `ΔW` is unchanged.
pub fn grow_rank(old: &LoraAdapter, new_rank: usize, seed: u64) -> Result<LoraAdapter> {
    let r_old = old.rank();
    if new_rank < r_old {
        return Err(Error::Contract(format!(
            "cannot shrink adapter `{}` from rank {r_old} to {new_rank}",
            old.layer_id
        )));
    }
    if new_rank == r_old {
        return Ok(old.clone());
    }
    let (m, h) = old.layer_shape();
    check_rank(m, h, new_rank)?;
    let fresh = init_adapter(&old.layer_id, (m, h), new_rank, seed)?;
    let mut a = fresh.a;
    for i in 0..r_old {
        a.row_mut(i).copy_from_slice(old.a.row(i));
    }
    let mut c = Tensor::zeros(&[m, new_rank]);
    for i in 0..m {
        c.row_mut(i)[..r_old].copy_from_slice(old.c.row(i));
    }
    Ok(LoraAdapter {
        layer_id: old.layer_id.clone(),
        a,
        c,
        scale: old.scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
}

/// `act(x·(W + scale·C·A)ᵀ + b)` on plain tensors, `x` of shape `[n, h]`.
pub fn adapted_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    adapter: &LoraAdapter,
    x: &Tensor,
    activation: Activation,
) -> Result<Tensor> {
    let (m, h) = weight.dims2()?;
    if adapter.layer_shape() != (m, h) {
        return Err(Error::config(format!(
            "adapter `{}` shaped for {:?}, weight is {m}x{h}",
            adapter.layer_id,
            adapter.layer_shape()
        )));
    }
    let mut y = x.matmul_nt(weight)?;
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::config("bias length mismatch"));
        }
        for r in 0..y.rows() {
            for (o, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let low = x.matmul_nt(&adapter.a)?.matmul_nt(&adapter.c)?;
    let y = y.axpy(adapter.scale, &low)?;
    Ok(match activation {
        Activation::Identity => y,
        Activation::Silu => y.map(silu),
    })
}

/// Folds adapters into their layers' `<layer>.weight` entries.
pub fn merge(adapters: Vec<LoraAdapter>, params: &mut ParamStore) -> Result<()> {
    let mut seen = BTreeSet::new();
    for a in &adapters {
        if !seen.insert(a.layer_id.clone()) {
            return Err(Error::config(format!("duplicate adapters for layer `{}`", a.layer_id)));
        }
        let w = params
            .value(&format!("{}.weight", a.layer_id))
            .map_err(|_| Error::config(format!("adapter for unknown layer `{}`", a.layer_id)))?;
        if w.dims2()? != a.layer_shape() {
            return Err(Error::config(format!(
                "adapter `{}` does not fit its layer",
                a.layer_id
            )));
        }
    }
    for a in adapters {
        let delta = a.delta()?;
        let p = params.get_mut(&format!("{}.weight", a.layer_id)).expect("validated");
        p.value.add_assign(&delta)?;
        LoraAdapter::remove_from(params, &a.layer_id);
    }
    Ok(())
}

/// Every adapter currently installed in `store`, ordered by layer id.
pub fn installed_adapters(store: &ParamStore) -> Vec<LoraAdapter> {
    store
        .names()
        .iter()
        .filter_map(|n| n.strip_suffix(".lora_a"))
        .filter_map(|layer| LoraAdapter::extract(store, layer))
        .collect()
}

/// Merges every installed adapter into the base weights of `store`.
///
/// Returns the number of merged adapters; a store without adapters is an
/// error, which makes a second merge fail.
pub fn merge_installed(store: &mut ParamStore) -> Result<usize> {
    let adapters = installed_adapters(store);
    if adapters.is_empty() {
        return Err(Error::Contract("no adapters to merge".into()));
    }
    let n = adapters.len();
    merge(adapters, store)?;
    Ok(n)
}

/// Trainable block sets `G_1 ⊆ … ⊆ G_stages` for a net with `depth` down
/// blocks: the mid block with the innermost down/up pair first, then one
/// symmetric pair per stage until every block is included.
pub fn layer_schedule(depth: usize, stages: usize) -> Vec<Vec<String>> {
    let mut out = Vec::with_capacity(stages);
    let mut current = vec![MID_BLOCK.to_string()];
    let mut pairs_added = 0;
    for _ in 0..stages {
        if pairs_added < depth {
            current.push(down_block(depth - 1 - pairs_added));
            current.push(up_block(pairs_added));
            pairs_added += 1;
        }
        out.push(current.clone());
    }
    out
}

/// Every block of a `depth`-deep net, for runs without layer growth.
pub fn all_blocks(depth: usize) -> Vec<String> {
    layer_schedule(depth, depth).pop().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from_seed;

    #[test]
    fn rank_schedules() {
        assert_eq!(rank_schedule(4, 64, 2.0, 5).unwrap(), vec![4, 8, 16, 32, 64]);
        assert_eq!(rank_schedule(6, 16, 2.0, 5).unwrap(), vec![6, 12, 16, 16, 16]);
        assert_eq!(rank_schedule(8, 8, 2.0, 4).unwrap(), vec![8; 4]);
        assert!(matches!(rank_schedule(9, 8, 2.0, 3), Err(Error::Config(_))));
        assert!(rank_schedule(2, 8, 1.0, 3).is_err());
    }

    #[test]
    fn fresh_adapter_contract() {
        let a = init_adapter("l", (4, 6), 2, 3).unwrap();
        assert_eq!(a.a.shape(), &[2, 6]);
        assert_eq!(a.c.shape(), &[4, 2]);
        assert!(a.delta().unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a, init_adapter("l", (4, 6), 2, 3).unwrap());
        assert!(matches!(init_adapter("l", (4, 6), 3, 3), Err(Error::Config(_))));
    }

    fn trained(rank: usize, seed: u64) -> LoraAdapter {
        let mut a = init_adapter("l", (8, 6), rank, seed).unwrap();
        a.c = normal_tensor(&mut rng_from_seed(seed + 1), &[8, rank], 0.5);
        a
    }

    #[test]
    fn growth_preserves_blocks_and_function() {
        let old = trained(2, 1);
        let new = grow_rank(&old, 3, 7).unwrap();
        assert_eq!(new.a.shape(), &[3, 6]);
        assert_eq!(new.c.shape(), &[8, 3]);
        for i in 0..2 {
            assert_eq!(new.a.row(i), old.a.row(i));
        }
        for i in 0..8 {
            assert_eq!(&new.c.row(i)[..2], old.c.row(i));
            assert_eq!(new.c.row(i)[2], 0.0);
        }
        let x = normal_tensor(&mut rng_from_seed(4), &[5, 6], 1.0);
        let w = Tensor::zeros(&[8, 6]);
        let y0 = adapted_forward(&w, None, &old, &x, Activation::Identity).unwrap();
        let y1 = adapted_forward(&w, None, &new, &x, Activation::Identity).unwrap();
        assert_eq!(y0, y1);
        assert_eq!(grow_rank(&old, 2, 7).unwrap(), old);
        assert!(matches!(grow_rank(&new, 2, 7), Err(Error::Contract(_))));
    }

    #[test]
    fn growth_on_4x6_layer() {
        let mut old = init_adapter("l", (4, 6), 1, 2).unwrap();
        old.c = normal_tensor(&mut rng_from_seed(9), &[4, 1], 1.0);
        // 4x6 layers admit rank <= 2 only.
        assert!(grow_rank(&old, 3, 1).is_err());
        let new = grow_rank(&old, 2, 1).unwrap();
        assert_eq!(new.a.shape(), &[2, 6]);
        assert_eq!(new.c.shape(), &[4, 2]);
        assert_eq!(new.a.row(0), old.a.row(0));
    }

    #[test]
    fn adapted_forward_cases() {
        let mut r = rng_from_seed(10);
        let w = normal_tensor(&mut r, &[4, 4], 1.0);
        let x = normal_tensor(&mut r, &[3, 4], 1.0);
        let fresh = init_adapter("l", (4, 4), 2, 1).unwrap();
        let base = x.matmul_nt(&w).unwrap();
        assert_eq!(
            adapted_forward(&w, None, &fresh, &x, Activation::Identity).unwrap(),
            base
        );

        // C·A = I with W = 0 gives the identity map.
        let mut eye = init_adapter("l", (4, 4), 2, 1).unwrap();
        eye.a = Tensor::new(vec![2, 4], vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        eye.c = Tensor::new(vec![4, 2], vec![1., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let x2 = Tensor::new(vec![1, 4], vec![0.3, -1.2, 0.0, 0.0]).unwrap();
        let y = adapted_forward(&Tensor::zeros(&[4, 4]), None, &eye, &x2, Activation::Identity).unwrap();
        assert_eq!(y, x2);
    }

    #[test]
    fn merge_contracts() {
        let mut store = ParamStore::new();
        store.insert("l.weight", Tensor::identity(8).slice_rows(0, 8), false);
        let fresh = init_adapter("l", (8, 8), 2, 1).unwrap();
        let before = store.clone();
        merge(vec![fresh.clone()], &mut store).unwrap();
        assert_eq!(store, before);
        assert!(matches!(
            merge(vec![fresh.clone(), fresh.clone()], &mut store),
            Err(Error::Config(_))
        ));
        let mut stray = fresh.clone();
        stray.layer_id = "nope".into();
        assert!(merge(vec![stray], &mut store).is_err());

        fresh.install(&mut store, true);
        assert_eq!(merge_installed(&mut store).unwrap(), 1);
        assert!(matches!(merge_installed(&mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_schedule_grows_symmetrically() {
        let g = layer_schedule(3, 5);
        assert_eq!(g[0], vec!["mid", "down2", "up0"]);
        assert_eq!(g[1], vec!["mid", "down2", "up0", "down1", "up1"]);
        assert_eq!(g[2].len(), 7);
        assert_eq!(g[3], g[2]);
        assert_eq!(g[4], g[2]);
        for k in 1..5 {
            assert!(g[k - 1].iter().all(|b| g[k].contains(b)));
        }
        assert_eq!(all_blocks(3).len(), 7);
    }
}
