//! Sample-quality metrics.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance within `x`, used as RBF bandwidth.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::config("bandwidth needs at least two points"));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if med <= 0.0 {
        return Err(Error::Data("all points coincide".into()));
    }
    Ok(med)
}

fn mean_kernel(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            s += (-gamma * sq_dist(a.row(i), b.row(j))).exp();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Biased MMD between point sets with kernel `exp(−‖x−y‖² / (2h²))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 || a.cols() != b.cols() {
        return Err(Error::config("MMD needs two non-empty sets of equal dimension"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::config("bandwidth must be positive"));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let m2 = mean_kernel(a, a, gamma) + mean_kernel(b, b, gamma) - 2.0 * mean_kernel(a, b, gamma);
    Ok(m2.max(0.0).sqrt())
}

/// MMD of `samples` against `data`, bandwidth from the data's median heuristic.
pub fn mmd_to_data(samples: &Tensor, data: &Tensor) -> Result<f64> {
    mmd_rbf(samples, data, median_bandwidth(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, rng_from_seed};

    #[test]
    fn identical_sets_have_zero_mmd() {
        let mut r = rng_from_seed(1);
        let a = normal_tensor(&mut r, &[50, 2], 1.0);
        assert!(mmd_to_data(&a, &a).unwrap() < 1e-7);
    }

    #[test]
    fn single_point_sets_match_closed_form() {
        let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let want = (2.0 - 2.0 * (-0.5f64).exp()).sqrt();
        assert!((mmd_rbf(&a, &b, 1.0).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn shift_increases_mmd() {
        let mut r = rng_from_seed(2);
        let a = normal_tensor(&mut r, &[200, 2], 1.0);
        let b = normal_tensor(&mut r, &[200, 2], 1.0);
        let far = b.map(|v| v + 3.0);
        let near = mmd_to_data(&b, &a).unwrap();
        assert!(mmd_to_data(&far, &a).unwrap() > 4.0 * near);
        assert!(
            (median_bandwidth(&Tensor::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap()).unwrap() - 2.0).abs()
                < 1e-15
        );
    }
}
