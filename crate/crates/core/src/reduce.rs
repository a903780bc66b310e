//! Trainable affine dimensionality reduction, `x' = (x - mean) P^T`.
//!
//! [`pca_fit`] initializes `mean` and `P` from data; afterwards both are free
//! parameters and `P` is not kept orthonormal.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// Input mean, length `D`.
    pub mean: Vec<f64>,
    /// Projection axes, `n_c x D` row-major.
    pub axes: Vec<f64>,
    pub components: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrads {
    pub mean: Vec<f64>,
    pub axes: Vec<f64>,
}

impl ProjectionParams {
    pub fn new(mean: Vec<f64>, axes: Vec<f64>, components: usize) -> Result<Self> {
        let input_dim = mean.len();
        if axes.len() != components * input_dim {
            return Err(Error::shape(format!(
                "{} axis entries for {components} x {input_dim} projection",
                axes.len()
            )));
        }
        Ok(ProjectionParams {
            mean,
            axes,
            components,
            input_dim,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut axes = vec![0.0; dim * dim];
        for i in 0..dim {
            axes[i * dim + i] = 1.0;
        }
        ProjectionParams {
            mean: vec![0.0; dim],
            axes,
            components: dim,
            input_dim: dim,
        }
    }

    pub fn axis(&self, i: usize) -> &[f64] {
        &self.axes[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn parameter_count(&self) -> usize {
        self.mean.len() + self.axes.len()
    }

    pub fn project_into(&self, x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        scratch.clear();
        scratch.extend(x.iter().zip(&self.mean).map(|(a, m)| a - m));
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.axis(i).iter().zip(scratch.iter()).map(|(p, c)| p * c).sum();
        }
    }

    pub fn project_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "vector of length {} for projection from {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut out = vec![0.0; self.components];
        self.project_into(x, &mut out, &mut Vec::with_capacity(self.input_dim));
        Ok(out)
    }

    /// Project every channel fiber of a `(n, h, w, D)` tensor.
    pub fn project(&self, x: &Tensor4) -> Result<Tensor4> {
        let [n, h, w, d] = x.dims();
        if d != self.input_dim {
            return Err(Error::shape(format!("{d} channels for projection from {}", self.input_dim)));
        }
        let mut out = Tensor4::zeros([n, h, w, self.components]);
        let mut scratch = Vec::with_capacity(d);
        for (src, dst) in x.data().chunks_exact(d.max(1)).zip(out.data_mut().chunks_exact_mut(self.components.max(1))) {
            self.project_into(src, dst, &mut scratch);
        }
        Ok(out)
    }

    /// Exact adjoint of [`ProjectionParams::project`] given the forward input.
    pub fn backward(&self, upstream: &Tensor4, input: &Tensor4) -> Result<(Tensor4, ProjectionGrads)> {
        let [n, h, w, d] = input.dims();
        if d != self.input_dim || upstream.dims() != [n, h, w, self.components] {
            return Err(Error::shape(format!(
                "upstream {:?} / input {:?} do not match projection {} -> {}",
                upstream.dims(),
                input.dims(),
                self.input_dim,
                self.components
            )));
        }
        let mut dx = Tensor4::zeros(input.dims());
        let mut daxes = vec![0.0; self.axes.len()];
        let mut centered = vec![0.0; d];
        for ((x, g), gx) in input
            .data()
            .chunks_exact(d.max(1))
            .zip(upstream.data().chunks_exact(self.components.max(1)))
            .zip(dx.data_mut().chunks_exact_mut(d.max(1)))
        {
            for ((c, a), m) in centered.iter_mut().zip(x).zip(&self.mean) {
                *c = a - m;
            }
            for (i, &gi) in g.iter().enumerate() {
                let row = &mut daxes[i * d..(i + 1) * d];
                for (r, c) in row.iter_mut().zip(&centered) {
                    *r += gi * c;
                }
                for (o, p) in gx.iter_mut().zip(self.axis(i)) {
                    *o += gi * p;
                }
            }
        }
        let mut dmean = vec![0.0; d];
        for gx in dx.data().chunks_exact(d.max(1)) {
            for (m, v) in dmean.iter_mut().zip(gx) {
                *m -= v;
            }
        }
        Ok((dx, ProjectionGrads { mean: dmean, axes: daxes }))
    }
}

/// Fit mean and top-`n_c` principal axes. Covariance uses `1/(N-1)`; axes
/// are ordered by descending eigenvalue and signed so each axis's
/// largest-magnitude entry is positive.
pub fn pca_fit(samples: &[Vec<f64>], components: usize) -> Result<ProjectionParams> {
    let n = samples.len();
    let dim = samples.first().map_or(0, Vec::len);
    if dim == 0 || components == 0 || components > dim {
        return Err(Error::config(format!(
            "cannot keep {components} components of {dim}-dimensional data"
        )));
    }
    if n <= components {
        return Err(Error::config(format!(
            "PCA needs more than {components} samples, got {n}"
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::shape(format!("sample of length {} among {dim}-vectors", bad.len())));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let effective_rank = order
        .iter()
        .filter(|&&i| top > 0.0 && eig.eigenvalues[i] > RANK_TOLERANCE * top)
        .count();
    if effective_rank < components {
        return Err(Error::RankDeficient {
            effective_rank,
            requested: components,
        });
    }

    let mut axes = Vec::with_capacity(components * dim);
    for &col in order.iter().take(components) {
        let v = eig.eigenvectors.column(col);
        let pivot = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        axes.extend(v.iter().map(|x| sign * x));
    }
    ProjectionParams::new(mean, axes, components)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut r = rng::seeded(seed);
        Tensor4::from_fn(dims, |_| r.random_range(-1.0..1.0))
    }

    /// Cyclic Jacobi eigenvalue iteration, kept independent of the nalgebra
    /// solver used by `pca_fit`.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect()
    }

    fn correlated_samples(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
                (0..d).map(|i| (0..d).map(|j| mix[i][j] * z[j]).sum::<f64>() + 0.5 * i as f64).collect()
            })
            .collect()
    }

    #[test]
    fn line_data_keeps_all_variance() {
        let dir = [1.0, -2.0, 0.5];
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let s = (i as f64 * 0.37).sin() * 3.0;
                dir.iter().map(|d| 1.0 + s * d).collect()
            })
            .collect();
        let p = pca_fit(&samples, 1).unwrap();
        let proj: Vec<f64> = samples.iter().map(|s| p.project_vector(s).unwrap()[0]).collect();
        let n = proj.len() as f64;
        let pm = proj.iter().sum::<f64>() / n;
        let pvar = proj.iter().map(|v| (v - pm).powi(2)).sum::<f64>() / (n - 1.0);
        let cov = covariance(&samples);
        let total: f64 = (0..3).map(|i| cov[i][i]).sum();
        assert!((pvar - total).abs() < 1e-10 * total.max(1.0));
    }

    #[test]
    fn projecting_the_mean_gives_zero() {
        let samples = correlated_samples(100, 5, 1);
        let p = pca_fit(&samples, 3).unwrap();
        assert!(p.project_vector(&p.mean).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn projected_covariance_is_diagonal_with_top_eigenvalues() {
        let samples = correlated_samples(200, 8, 2);
        let p = pca_fit(&samples, 3).unwrap();
        let proj: Vec<Vec<f64>> = samples.iter().map(|s| p.project_vector(s).unwrap()).collect();
        let pc = covariance(&proj);
        let oracle = jacobi_eigenvalues(covariance(&samples));
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { oracle[i] } else { 0.0 };
                assert!((pc[i][j] - expected).abs() < 1e-8, "({i},{j}): {} vs {expected}", pc[i][j]);
            }
        }
    }

    #[test]
    fn axes_are_orthonormal_at_init_and_signed() {
        let samples = correlated_samples(150, 6, 3);
        let p = pca_fit(&samples, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = p.axis(i).iter().zip(p.axis(j)).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10);
            }
            let pivot = p.axis(i).iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn rank_deficiency_reports_effective_rank() {
        let samples: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        match pca_fit(&samples, 2) {
            Err(Error::RankDeficient {
                effective_rank,
                requested,
            }) => {
                assert_eq!((effective_rank, requested), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_projection() {
        let p = ProjectionParams::identity(4);
        let x = random_tensor([1, 3, 2, 4], 4);
        assert_eq!(p.project(&x).unwrap(), x);
    }

    #[test]
    fn matches_naive_matrix_multiply() {
        let mut r = rng::seeded(5);
        let (d, nc) = (7, 3);
        let p = ProjectionParams::new(
            (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            (0..d * nc).map(|_| r.random_range(-1.0..1.0)).collect(),
            nc,
        )
        .unwrap();
        let x = random_tensor([2, 3, 2, d], 6);
        let out = p.project(&x).unwrap();
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..2 {
                    for i in 0..nc {
                        let mut s = 0.0;
                        for j in 0..d {
                            s += (x.get(n, h, w, j) - p.mean[j]) * p.axes[i * d + j];
                        }
                        assert!((out.get(n, h, w, i) - s).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(p.project(&random_tensor([1, 1, 1, 6], 0)).is_err());
    }

    #[test]
    fn mean_gradient_is_negated_back_projection() {
        let samples = correlated_samples(60, 5, 7);
        let p = pca_fit(&samples, 2).unwrap();
        let x = random_tensor([1, 2, 3, 5], 8);
        let up = random_tensor([1, 2, 3, 2], 9);
        let (_, g) = p.backward(&up, &x).unwrap();
        for j in 0..5 {
            let mut expected = 0.0;
            for fiber in up.data().chunks(2) {
                for i in 0..2 {
                    expected -= fiber[i] * p.axes[i * 5 + j];
                }
            }
            assert!((g.mean[j] - expected).abs() < 1e-12);
        }
        let (dx, gz) = p.backward(&Tensor4::zeros(up.dims()), &x).unwrap();
        assert!(dx.data().iter().chain(&gz.mean).chain(&gz.axes).all(|&v| v == 0.0));
    }

    #[test]
    fn finite_difference_check() {
        let mut r = rng::seeded(10);
        let (d, nc) = (8, 3);
        let p = ProjectionParams::new(
            (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            (0..d * nc).map(|_| r.random_range(-1.0..1.0)).collect(),
            nc,
        )
        .unwrap();
        let x = random_tensor([1, 1, 5, d], 11);
        let probe = random_tensor([1, 1, 5, nc], 12);
        let loss = |pp: &ProjectionParams, xx: &Tensor4| -> f64 {
            let o = pp.project(xx).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b + 0.5 * a * a).sum()
        };
        let out = p.project(&x).unwrap();
        let mut up = probe.clone();
        for (u, o) in up.data_mut().iter_mut().zip(out.data()) {
            *u += o;
        }
        let (dx, g) = p.backward(&up, &x).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let num = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            assert!(rel(dx.data()[i], num) < 1e-6);
        }
        for i in 0..d {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.mean[i] += h;
            b.mean[i] -= h;
            let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!(rel(g.mean[i], num) < 1e-6);
        }
        for i in 0..d * nc {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.axes[i] += h;
            b.axes[i] -= h;
            let num = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!(rel(g.axes[i], num) < 1e-6);
        }
    }
}
