//! Toy conditional data: a mixture of isotropic Gaussians on a circle, with
//! components addressed through fixed projected embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{child_rng, normal_tensor, SeededRng};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub components: usize,
    pub radius: f64,
    pub component_std: f64,
    pub cond_dim: usize,
    /// Seed of the fixed embedding projection.
    pub projection_seed: u64,
    /// Probability of replacing a training condition with the null embedding.
    pub cond_dropout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            components: 4,
            radius: 4.0,
            component_std: 1.0,
            cond_dim: 8,
            projection_seed: 0,
            cond_dropout: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.cond_dim < self.components {
            return Err(Error::config("need at least one component and cond_dim >= components"));
        }
        if !(self.radius >= 0.0 && self.component_std > 0.0) {
            return Err(Error::config("radius must be >= 0 and component_std > 0"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Component means and the embedding projection `P` (`[cond_dim, K]`, columns
/// orthogonal with squared norm `cond_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSpace {
    means: Tensor,
    projection: Tensor,
}

impl ConditionSpace {
    pub fn new(means: Tensor, cond_dim: usize, seed: u64) -> Result<Self> {
        let k = means.rows();
        if cond_dim < k {
            return Err(Error::config("cond_dim must be at least the component count"));
        }
        let mut rng = child_rng(seed, "condition-projection");
        let raw = normal_tensor(&mut rng, &[k, cond_dim], 1.0);
        // Gram-Schmidt on the rows of `raw`, then transpose to columns.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        for i in 0..k {
            let mut v = raw.row(i).to_vec();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-9 {
                return Err(Error::Data("degenerate projection draw".into()));
            }
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
        let s = (cond_dim as f64).sqrt();
        let mut projection = Tensor::zeros(&[cond_dim, k]);
        for (j, b) in basis.iter().enumerate() {
            for (i, &v) in b.iter().enumerate() {
                projection.set2(i, j, s * v);
            }
        }
        Ok(ConditionSpace { means, projection })
    }

    pub fn components(&self) -> usize {
        self.means.rows()
    }

    pub fn cond_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn data_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.components() {
            return Err(Error::Data(format!(
                "unknown condition id {id} (have {})",
                self.components()
            )));
        }
        Ok(())
    }

    pub fn embed(&self, id: usize) -> Result<Vec<f64>> {
        self.check_id(id)?;
        Ok((0..self.cond_dim()).map(|i| self.projection.get2(i, id)).collect())
    }

    /// Row-stacked embeddings for a list of ids.
    pub fn embed_all(&self, ids: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[ids.len(), self.cond_dim()]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&self.embed(id)?);
        }
        Ok(out)
    }

    /// Mixture weights `Pᵀc / cond_dim`; one-hot for a clean embedding.
    pub fn weights(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.cond_dim() {
            return Err(Error::config(format!(
                "embedding has {} values, expected {}",
                c.len(),
                self.cond_dim()
            )));
        }
        let s2 = self.cond_dim() as f64;
        Ok((0..self.components())
            .map(|k| {
                (0..self.cond_dim())
                    .map(|i| self.projection.get2(i, k) * c[i])
                    .sum::<f64>()
                    / s2
            })
            .collect())
    }

    /// Weighted component mean; the zero embedding decodes to the origin.
    pub fn decode(&self, c: &[f64]) -> Result<Vec<f64>> {
        let w = self.weights(c)?;
        Ok((0..self.data_dim())
            .map(|j| w.iter().enumerate().map(|(k, wk)| wk * self.means.get2(k, j)).sum())
            .collect())
    }

    pub fn mean_of(&self, id: usize) -> Result<Vec<f64>> {
        self.check_id(id)?;
        Ok(self.means.row(id).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMixture {
    pub config: DataConfig,
    pub space: ConditionSpace,
}

impl ToyMixture {
    pub fn new(config: DataConfig) -> Result<Self> {
        config.validate()?;
        let k = config.components;
        let mut means = Tensor::zeros(&[k, 2]);
        for i in 0..k {
            let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            means.set2(i, 0, config.radius * a.cos());
            means.set2(i, 1, config.radius * a.sin());
        }
        let space = ConditionSpace::new(means, config.cond_dim, config.projection_seed)?;
        Ok(ToyMixture { config, space })
    }

    pub fn data_dim(&self) -> usize {
        2
    }

    /// `n` samples with uniformly drawn component ids.
    pub fn sample(&self, rng: &mut SeededRng, n: usize) -> (Tensor, Vec<usize>) {
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.config.components)).collect();
        let x = self.sample_for(rng, &ids);
        (x, ids)
    }

    /// One sample per listed component id.
    pub fn sample_for(&self, rng: &mut SeededRng, ids: &[usize]) -> Tensor {
        let mut x = normal_tensor(rng, &[ids.len(), 2], self.config.component_std);
        for (r, &id) in ids.iter().enumerate() {
            let m = self.space.means.row(id).to_vec();
            x.row_mut(r).iter_mut().zip(m).for_each(|(v, mu)| *v += mu);
        }
        x
    }

    /// Training embeddings with condition dropout to the null embedding.
    pub fn training_conditions(&self, rng: &mut SeededRng, ids: &[usize]) -> Result<Tensor> {
        let mut c = self.space.embed_all(ids)?;
        for r in 0..ids.len() {
            if rng.random::<f64>() < self.config.cond_dropout {
                c.row_mut(r).fill(0.0);
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from_seed;

    #[test]
    fn embeddings_decode_to_component_means() {
        let m = ToyMixture::new(DataConfig::default()).unwrap();
        for id in 0..4 {
            let c = m.space.embed(id).unwrap();
            let w = m.space.weights(&c).unwrap();
            for (k, wk) in w.iter().enumerate() {
                let want = if k == id { 1.0 } else { 0.0 };
                assert!((wk - want).abs() < 1e-12);
            }
            let d = m.space.decode(&c).unwrap();
            let mu = m.space.mean_of(id).unwrap();
            assert!((d[0] - mu[0]).abs() < 1e-12 && (d[1] - mu[1]).abs() < 1e-12);
        }
        assert_eq!(m.space.decode(&[0.0; 8]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(m.space.embed(4), Err(Error::Data(_))));
    }

    #[test]
    fn samples_have_component_moments() {
        let m = ToyMixture::new(DataConfig::default()).unwrap();
        let mut r = rng_from_seed(3);
        let x = m.sample_for(&mut r, &vec![1; 4000]);
        let mx = (0..4000).map(|i| x.row(i)[0]).sum::<f64>() / 4000.0;
        let my = (0..4000).map(|i| x.row(i)[1]).sum::<f64>() / 4000.0;
        assert!(mx.abs() < 0.1 && (my - 4.0).abs() < 0.1);
    }
}
