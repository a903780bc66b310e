//! Diagonal-covariance Gaussian mixture layer.
//!
//! Parameters are stored unconstrained: mixture weights as logits `alpha`
//! (`w = softmax(alpha)`) and variances as log-variances, so gradient steps
//! cannot leave the valid set. Variances are floored at [`VARIANCE_FLOOR`]
//! by [`GmmParams::clamp_variances`] after every update and inside EM.
//!
//! The layer forward is [`posteriors`]: per channel fiber, the responsibility
//! of each component, computed in the log domain with log-sum-exp.

use std::f64::consts::PI;

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor4;

pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Components whose total responsibility drops below this are reseeded.
const EMPTY_COMPONENT: f64 = 1e-10;

const KMEANS_SUBSAMPLE: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub alpha: Vec<f64>,
    /// `K x n_c` row-major.
    pub means: Vec<f64>,
    /// `K x n_c` row-major.
    pub log_vars: Vec<f64>,
    pub components: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmGrads {
    pub alpha: Vec<f64>,
    pub means: Vec<f64>,
    pub log_vars: Vec<f64>,
}

impl GmmGrads {
    pub fn zeros(components: usize, dim: usize) -> Self {
        GmmGrads {
            alpha: vec![0.0; components],
            means: vec![0.0; components * dim],
            log_vars: vec![0.0; components * dim],
        }
    }

    pub fn add(&mut self, other: &GmmGrads) {
        for (a, b) in self
            .alpha
            .iter_mut()
            .chain(&mut self.means)
            .chain(&mut self.log_vars)
            .zip(other.alpha.iter().chain(&other.means).chain(&other.log_vars))
        {
            *a += b;
        }
    }
}

/// Softmax with max subtraction.
pub fn mixture_weights(alpha: &[f64]) -> Vec<f64> {
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(v)`, stable for any finite inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmParams {
    pub fn new(alpha: Vec<f64>, means: Vec<f64>, log_vars: Vec<f64>) -> Result<Self> {
        let components = alpha.len();
        if components == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        let dim = means.len() / components;
        if means.len() != components * dim || log_vars.len() != means.len() || dim == 0 {
            return Err(Error::shape(format!(
                "{} means / {} log-variances for {components} components",
                means.len(),
                log_vars.len()
            )));
        }
        Ok(GmmParams {
            alpha,
            means,
            log_vars,
            components,
            dim,
        })
    }

    /// Build from weights and plain variances; `alpha = ln w` shifted so the
    /// largest logit is zero.
    pub fn from_moments(weights: &[f64], means: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let logw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let alpha = logw.iter().map(|l| l - top).collect();
        let log_vars = variances.iter().map(|v| v.max(VARIANCE_FLOOR).ln()).collect();
        GmmParams::new(alpha, means, log_vars)
    }

    pub fn weights(&self) -> Vec<f64> {
        mixture_weights(&self.alpha)
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn log_var(&self, k: usize) -> &[f64] {
        &self.log_vars[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_vars.iter().map(|l| l.exp()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.alpha.len() + self.means.len() + self.log_vars.len()
    }

    pub fn clamp_variances(&mut self) {
        let floor = VARIANCE_FLOOR.ln();
        for l in &mut self.log_vars {
            if *l < floor {
                *l = floor;
            }
        }
    }

    /// `ln u_k(x)` for a diagonal Gaussian.
    pub fn log_component_density(&self, x: &[f64], k: usize) -> f64 {
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for ((xi, mi), li) in x.iter().zip(self.mean(k)).zip(self.log_var(k)) {
            let d = xi - mi;
            quad += d * d * (-li).exp();
            logdet += li;
        }
        -0.5 * (self.dim as f64 * (2.0 * PI).ln() + logdet + quad)
    }

    fn evaluator(&self) -> Evaluator<'_> {
        let w = self.weights();
        let ln2pi = (2.0 * PI).ln();
        let consts = (0..self.components)
            .map(|k| w[k].ln() - 0.5 * (self.dim as f64 * ln2pi + self.log_var(k).iter().sum::<f64>()))
            .collect();
        Evaluator {
            params: self,
            consts,
            inv_vars: self.log_vars.iter().map(|l| (-l).exp()).collect(),
        }
    }

    /// Posterior responsibilities of one descriptor.
    pub fn posteriors_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut out = vec![0.0; self.components];
        self.evaluator().posteriors_into(x, &mut out);
        Ok(out)
    }

    /// Mean log-likelihood per sample.
    pub fn mean_log_likelihood(&self, samples: &[Vec<f64>]) -> f64 {
        let ev = self.evaluator();
        let mut joint = vec![0.0; self.components];
        let total: f64 = samples.iter().map(|x| ev.log_joint(x, &mut joint)).sum();
        total / samples.len() as f64
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::shape(format!("{d}-dimensional input to {}-dimensional mixture", self.dim)));
        }
        Ok(())
    }
}

struct Evaluator<'a> {
    params: &'a GmmParams,
    /// `ln w_k - ½(n_c ln 2π + Σ log σ²)`.
    consts: Vec<f64>,
    inv_vars: Vec<f64>,
}

impl Evaluator<'_> {
    /// Fill `joint[k] = ln w_k + ln u_k(x)` and return `ln p(x)`.
    fn log_joint(&self, x: &[f64], joint: &mut [f64]) -> f64 {
        let d = self.params.dim;
        for (k, j) in joint.iter_mut().enumerate() {
            let mu = &self.params.means[k * d..(k + 1) * d];
            let iv = &self.inv_vars[k * d..(k + 1) * d];
            let mut quad = 0.0;
            for i in 0..d {
                let diff = x[i] - mu[i];
                quad += diff * diff * iv[i];
            }
            *j = self.consts[k] - 0.5 * quad;
        }
        log_sum_exp(joint)
    }

    fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.log_joint(x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
        max + total.ln()
    }
}

/// Per-fiber posteriors of a `(n, h, w, n_c)` tensor, giving `(n, h, w, K)`.
pub fn posteriors(x: &Tensor4, params: &GmmParams) -> Result<Tensor4> {
    let [n, h, w, d] = x.dims();
    params.check_dim(d)?;
    let ev = params.evaluator();
    let k = params.components;
    let mut out = Tensor4::zeros([n, h, w, k]);
    for (src, dst) in x.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(k)) {
        ev.posteriors_into(src, dst);
    }
    Ok(out)
}

/// Exact adjoint of [`posteriors`], given the forward input and output.
pub fn posteriors_backward(
    upstream: &Tensor4,
    x: &Tensor4,
    gamma: &Tensor4,
    params: &GmmParams,
) -> Result<(Tensor4, GmmGrads)> {
    let [n, h, w, d] = x.dims();
    let k = params.components;
    params.check_dim(d)?;
    if upstream.dims() != [n, h, w, k] || gamma.dims() != [n, h, w, k] {
        return Err(Error::shape(format!(
            "upstream {:?} / posteriors {:?} do not match input {:?} with {k} components",
            upstream.dims(),
            gamma.dims(),
            x.dims()
        )));
    }
    let weights = params.weights();
    let inv_vars: Vec<f64> = params.log_vars.iter().map(|l| (-l).exp()).collect();
    let mut dx = Tensor4::zeros(x.dims());
    let mut grads = GmmGrads::zeros(k, d);
    let mut dlogjoint = vec![0.0; k];
    for (((xf, gf), uf), dxf) in x
        .data()
        .chunks_exact(d)
        .zip(gamma.data().chunks_exact(k))
        .zip(upstream.data().chunks_exact(k))
        .zip(dx.data_mut().chunks_exact_mut(d))
    {
        // softmax over components: da_k = γ_k (dγ_k - Σ_l γ_l dγ_l)
        let inner: f64 = gf.iter().zip(uf).map(|(g, u)| g * u).sum();
        for c in 0..k {
            dlogjoint[c] = gf[c] * (uf[c] - inner);
        }
        for c in 0..k {
            let da = dlogjoint[c];
            if da == 0.0 {
                continue;
            }
            grads.alpha[c] += da;
            for i in 0..d {
                let idx = c * d + i;
                let diff = xf[i] - params.means[idx];
                let scaled = diff * inv_vars[idx];
                dxf[i] -= da * scaled;
                grads.means[idx] += da * scaled;
                grads.log_vars[idx] += da * 0.5 * (diff * scaled - 1.0);
            }
        }
    }
    // d ln w_k / d alpha_j = δ_jk - w_j
    let total: f64 = grads.alpha.iter().sum();
    for (g, w) in grads.alpha.iter_mut().zip(&weights) {
        *g -= w * total;
    }
    Ok((dx, grads))
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the mean log-likelihood gains less than this.
    pub tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    /// Mean log-likelihood per sample, one entry per E-step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    pub reseeded: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(samples: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let pool: Vec<&Vec<f64>> = if samples.len() > KMEANS_SUBSAMPLE {
        (0..KMEANS_SUBSAMPLE)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect()
    } else {
        samples.iter().collect()
    };
    let mut centers = vec![pool[rng.random_range(0..pool.len())].clone()];
    let mut dist: Vec<f64> = pool.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = pool.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..pool.len())
        };
        let c = pool[pick].clone();
        for (d, p) in dist.iter_mut().zip(&pool) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Fit a diagonal GMM: k-means++ seeding, one hard-assignment pass, then EM.
pub fn em_fit(samples: &[Vec<f64>], cfg: &EmConfig) -> Result<EmFit> {
    let k = cfg.components;
    if k == 0 {
        return Err(Error::config("EM needs at least one component"));
    }
    if samples.is_empty() {
        return Err(Error::config("EM needs at least one sample"));
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("EM samples must share a nonzero dimension"));
    }
    if samples.len() < 10 * k {
        warn!("EM with {} samples for {k} components; at least {} recommended", samples.len(), 10 * k);
    }
    let n = samples.len() as f64;
    let mut rng = rng::seeded(cfg.seed);

    let mut global_mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in global_mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    global_mean.iter_mut().for_each(|m| *m /= n);
    let mut global_var = vec![0.0; dim];
    for s in samples {
        for ((g, v), m) in global_var.iter_mut().zip(s).zip(&global_mean) {
            *g += (v - m) * (v - m);
        }
    }
    global_var.iter_mut().for_each(|g| *g = (*g / n).max(VARIANCE_FLOOR));

    // hard assignment to the seeded centers
    let centers = kmeans_pp(samples, k, &mut rng);
    let assign: Vec<usize> = samples
        .par_iter()
        .map(|s| {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(s, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect();
    let mut counts = vec![0usize; k];
    let mut means = vec![0.0; k * dim];
    for (s, &c) in samples.iter().zip(&assign) {
        counts[c] += 1;
        for (m, v) in means[c * dim..(c + 1) * dim].iter_mut().zip(s) {
            *m += v;
        }
    }
    let mut vars = vec![0.0; k * dim];
    for c in 0..k {
        if counts[c] == 0 {
            means[c * dim..(c + 1) * dim].copy_from_slice(&centers[c]);
        } else {
            means[c * dim..(c + 1) * dim].iter_mut().for_each(|m| *m /= counts[c] as f64);
        }
    }
    for (s, &c) in samples.iter().zip(&assign) {
        for i in 0..dim {
            let d = s[i] - means[c * dim + i];
            vars[c * dim + i] += d * d;
        }
    }
    for c in 0..k {
        for i in 0..dim {
            vars[c * dim + i] = if counts[c] > 1 {
                vars[c * dim + i] / counts[c] as f64
            } else {
                global_var[i]
            };
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&c| (c.max(1)) as f64).collect();
    let wsum: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / wsum).collect();
    let mut params = GmmParams::from_moments(&weights, means, &vars)?;

    let mut history = Vec::new();
    let mut converged = false;
    let mut reseeded = 0;
    for _ in 0..cfg.max_iters.max(1) {
        // E-step, per sample in parallel, reduced in sample order
        let ev = params.evaluator();
        let per_sample: Vec<(f64, Vec<f64>)> = samples
            .par_iter()
            .map(|x| {
                let mut g = vec![0.0; k];
                let lse = ev.posteriors_into(x, &mut g);
                (lse, g)
            })
            .collect();
        let ll = per_sample.iter().map(|(l, _)| l).sum::<f64>() / n;
        if let Some(&prev) = history.last() {
            history.push(ll);
            if ll - prev < cfg.tol {
                converged = true;
                break;
            }
        } else {
            history.push(ll);
        }

        // M-step
        let mut nk = vec![0.0; k];
        let mut s1 = vec![0.0; k * dim];
        for ((_, g), x) in per_sample.iter().zip(samples) {
            for c in 0..k {
                nk[c] += g[c];
                for i in 0..dim {
                    s1[c * dim + i] += g[c] * x[i];
                }
            }
        }
        let mut means = vec![0.0; k * dim];
        for c in 0..k {
            if nk[c] >= EMPTY_COMPONENT {
                for i in 0..dim {
                    means[c * dim + i] = s1[c * dim + i] / nk[c];
                }
            }
        }
        let mut vars = vec![0.0; k * dim];
        for ((_, g), x) in per_sample.iter().zip(samples) {
            for c in 0..k {
                for i in 0..dim {
                    let d = x[i] - means[c * dim + i];
                    vars[c * dim + i] += g[c] * d * d;
                }
            }
        }
        let mut weights = vec![0.0; k];
        for c in 0..k {
            if nk[c] < EMPTY_COMPONENT {
                let pick = &samples[rng.random_range(0..samples.len())];
                warn!("EM component {c} is empty; reseeding at a random sample");
                for i in 0..dim {
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    means[c * dim + i] = pick[i] + 0.01 * global_var[i].sqrt() * jitter;
                    vars[c * dim + i] = global_var[i];
                }
                weights[c] = 1.0 / n;
                reseeded += 1;
            } else {
                for i in 0..dim {
                    vars[c * dim + i] /= nk[c];
                }
                weights[c] = nk[c] / n;
            }
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        params = GmmParams::from_moments(&weights, means, &vars)?;
    }
    Ok(EmFit {
        params,
        log_likelihoods: history,
        converged,
        reseeded,
    })
}
