use neuromed::pca::pca_fit;
use neuromed::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues and
/// eigenvectors as columns of `v` (row-major d×d).
fn jacobi(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    (0..d).for_each(|i| v[i * d + i] = 1.0);
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * d + j].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k * d + p], a[k * d + q]);
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p * d + k], a[q * d + k]);
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

fn covariance(x: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[i * d + j] as f64).sum::<f64>() / n as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (x[i * d + a] as f64 - mean[a]) * (x[i * d + b] as f64 - mean[b]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64 - 1.0);
    cov
}

/// Data with well-separated variances along a random rotation.
fn anisotropic(n: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..d).map(|j| 3.0 / (1.0 + j as f64).powf(1.5)).collect();
    let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .flat_map(|_| {
            let z: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-1.0f64..1.0)).collect();
            (0..d).map(|j| (0..d).map(|k| mix[j * d + k] * z[k]).sum::<f64>() as f32 + 0.5).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn components_match_jacobi_eigenvectors() {
    for (seed, n, d, k) in [(1, 200, 6, 3), (2, 150, 9, 4), (3, 80, 4, 4)] {
        let x = anisotropic(n, d, seed);
        let pca = pca_fit(&Tensor::new(vec![n, d], x.clone()).unwrap(), k).unwrap();
        let (vals, vecs) = jacobi(covariance(&x, n, d), d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let comps = pca.components().data();
        for (r, &col) in order.iter().take(k).enumerate() {
            let got = pca.explained_variance()[r];
            assert!((got - vals[col]).abs() <= 1e-6 * vals[order[0]], "seed {seed}: eigenvalue {r} {got} vs {}", vals[col]);
            let dot: f64 = (0..d).map(|j| comps[r * d + j] as f64 * vecs[j * d + col]).sum();
            assert!(dot.abs() > 1.0 - 1e-4, "seed {seed}: component {r} |cos| = {}", dot.abs());
        }
        let total: f64 = vals.iter().sum();
        let kept: f64 = order.iter().take(k).map(|&c| vals[c]).sum();
        assert!((pca.explained_ratio() - kept / total).abs() < 1e-6);
    }
}

#[test]
fn full_rank_projection_inverts() {
    let (n, d) = (60, 5);
    let x = anisotropic(n, d, 9);
    let t = Tensor::new(vec![n, d], x).unwrap();
    let pca = pca_fit(&t, d).unwrap();
    let back = pca.inverse_transform(&pca.transform(&t).unwrap()).unwrap();
    assert!(back.max_abs_diff(&t) < 1e-4);
}
