//! Principal component analysis for shrinking spiking-network inputs.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    components: Tensor,
    mean: Vec<f32>,
    explained_variance: Vec<f64>,
    total_variance: f64,
}

impl Pca {
    /// `[k, D]`, unit-norm rows ordered by decreasing variance. Each row's
    /// first nonzero coordinate is positive.
    pub fn components(&self) -> &Tensor {
        &self.components
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    /// Variance along each kept component.
    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Fraction of total variance captured by the kept components.
    pub fn explained_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }

    /// Projects rows of `[N, D]` (or a single `[D]` vector) onto the components.
    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        let [k, d] = *self.components.shape() else { unreachable!("components are [k, D]") };
        if data.len() % d != 0 || data.is_empty() {
            return Err(Error::dim(format!("data of {} values is not a multiple of {d} features", data.len())));
        }
        let n = data.len() / d;
        let mut out = Vec::with_capacity(n * k);
        for row in data.data().chunks_exact(d) {
            let centered: Vec<f32> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
            for comp in self.components.data().chunks_exact(d) {
                out.push(crate::tensor::kernels::dot(comp, &centered) as f32);
            }
        }
        Tensor::new(vec![n, k], out)
    }

    /// Maps `[N, k]` projections back to `[N, D]`.
    pub fn inverse_transform(&self, projected: &Tensor) -> Result<Tensor> {
        let [k, d] = *self.components.shape() else { unreachable!("components are [k, D]") };
        if projected.len() % k != 0 || projected.is_empty() {
            return Err(Error::dim(format!("projection of {} values is not a multiple of {k}", projected.len())));
        }
        let comps = self.components.data();
        let mut out = Vec::with_capacity(projected.len() / k * d);
        for row in projected.data().chunks_exact(k) {
            for j in 0..d {
                let mut acc = self.mean[j] as f64;
                for (c, &z) in row.iter().enumerate() {
                    acc += z as f64 * comps[c * d + j] as f64;
                }
                out.push(acc as f32);
            }
        }
        Tensor::new(vec![projected.len() / k, d], out)
    }
}

/// Fits the top-`k` principal components of `data: [N, D]`.
pub fn pca_fit(data: &Tensor, k: usize) -> Result<Pca> {
    let [n, d] = *data.shape() else {
        return Err(Error::dim(format!("PCA expects [N, D] data, got {:?}", data.shape())));
    };
    if n < 2 {
        return Err(Error::contract("PCA needs at least two samples"));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::contract(format!("cannot keep {k} components of {n}x{d} data")));
    }
    let x = data.data();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[i * d + j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(k * d);
    let mut explained = Vec::with_capacity(k);
    for &col in order.iter().take(k) {
        let v = eig.eigenvectors.column(col);
        let sign = v.iter().find(|c| c.abs() > 1e-12).map_or(1.0, |c| c.signum());
        comps.extend(v.iter().map(|&c| (c * sign) as f32));
        explained.push(eig.eigenvalues[col].max(0.0));
    }
    Ok(Pca {
        components: Tensor::new(vec![k, d], comps)?,
        mean: mean.into_iter().map(|m| m as f32).collect(),
        explained_variance: explained,
        total_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_is_one_component() {
        let pts: Vec<f32> = (0..10).flat_map(|i| [i as f32, 2.0 * i as f32 + 1.0]).collect();
        let pca = pca_fit(&Tensor::new(vec![10, 2], pts).unwrap(), 1).unwrap();
        assert!(pca.explained_ratio() >= 0.999);
        let c = pca.components().data();
        assert!(c[0] > 0.0);
        assert!((c[1] / c[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_k() {
        let t = Tensor::zeros(vec![3, 4]).unwrap();
        assert!(pca_fit(&t, 0).is_err());
        assert!(pca_fit(&t, 4).is_err());
        assert!(pca_fit(&Tensor::zeros(vec![1, 4]).unwrap(), 1).is_err());
    }
}
