//! Fisher-vector layer.
//!
//! Descriptors and their GMM posteriors are reduced to zeroth, first and
//! second order statistics (`S0`, `S1`, `S2`) plus a descriptor count `T`.
//! The statistics are additive, so accumulators from different time windows
//! or crops can be merged before the Fisher vector is formed:
//!
//! ```text
//! G_w[k]  = (S0_k - T w_k) / sqrt(w_k)
//! G_mu[k] = (S1_k - mu_k S0_k) / (sqrt(w_k) sigma_k)
//! G_sd[k] = (S2_k - 2 mu_k S1_k + (mu_k² - sigma_k²) S0_k) / (sqrt(2 w_k) sigma_k²)
//! ```
//!
//! concatenated as all `G_w`, then all `G_mu`, then all `G_sd`, for
//! `K (2 n_c + 1)` entries. Normalization is the signed square root followed
//! by L2 scaling.
//!
//! The backward pass is exact except for the signed square root, whose
//! derivative `1 / (2 sqrt(|z|))` is replaced by `1 / (2 sqrt(|z| + 1e-8))`
//! so it stays finite at zero.

use crate::error::{Error, Result};
use crate::gmm::{mixture_weights, posteriors, posteriors_backward, GmmGrads, GmmParams};
use crate::tensor::Tensor4;

pub const L2_EPS: f64 = 1e-12;
pub const POWER_EPS: f64 = 1e-8;

/// `K (2 n_c + 1)`.
pub fn fv_dim(components: usize, dim: usize) -> usize {
    components * (2 * dim + 1)
}

/// A spatial rectangle of a descriptor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(height: usize, width: usize) -> Self {
        Region {
            row: 0,
            col: 0,
            height,
            width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row + self.height <= height && self.col + self.width <= width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }
}

fn check_aligned(x: &Tensor4, gamma: &Tensor4, region: &Region) -> Result<()> {
    let [n, h, w, _] = x.dims();
    let [gn, gh, gw, _] = gamma.dims();
    if (n, h, w) != (gn, gh, gw) {
        return Err(Error::shape(format!(
            "descriptors {:?} and posteriors {:?} are not spatially aligned",
            x.dims(),
            gamma.dims()
        )));
    }
    if !region.fits(h, w) {
        return Err(Error::Bounds {
            axis: if region.row + region.height > h { 1 } else { 2 },
            offset: if region.row + region.height > h { region.row } else { region.col },
            size: if region.row + region.height > h { region.height } else { region.width },
            dim: if region.row + region.height > h { h } else { w },
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvAccumulator {
    pub s0: Vec<f64>,
    /// `K x n_c` row-major.
    pub s1: Vec<f64>,
    /// `K x n_c` row-major.
    pub s2: Vec<f64>,
    /// Number of descriptors accumulated.
    pub count: usize,
    pub components: usize,
    pub dim: usize,
}

impl FvAccumulator {
    pub fn new(components: usize, dim: usize) -> Self {
        FvAccumulator {
            s0: vec![0.0; components],
            s1: vec![0.0; components * dim],
            s2: vec![0.0; components * dim],
            count: 0,
            components,
            dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Add one descriptor with its posteriors.
    pub fn push(&mut self, x: &[f64], gamma: &[f64]) {
        let d = self.dim;
        for (k, &g) in gamma.iter().enumerate() {
            self.s0[k] += g;
            let s1 = &mut self.s1[k * d..(k + 1) * d];
            let s2 = &mut self.s2[k * d..(k + 1) * d];
            for i in 0..d {
                let gx = g * x[i];
                s1[i] += gx;
                s2[i] += gx * x[i];
            }
        }
        self.count += 1;
    }

    /// Accumulate every fiber of `x` (with posteriors `gamma`) that falls in
    /// `region`, or the whole grid when `region` is `None`. The leading axis
    /// of both tensors is summed over.
    pub fn accumulate(&mut self, x: &Tensor4, gamma: &Tensor4, region: Option<Region>) -> Result<()> {
        let [n, h, w, d] = x.dims();
        let region = region.unwrap_or(Region::full(h, w));
        check_aligned(x, gamma, &region)?;
        if d != self.dim || gamma.dims()[3] != self.components {
            return Err(Error::shape(format!(
                "accumulator for K={} n_c={} fed {d}-dim descriptors with {} posteriors",
                self.components,
                self.dim,
                gamma.dims()[3]
            )));
        }
        for f in 0..n {
            for y in region.row..region.row + region.height {
                for xx in region.col..region.col + region.width {
                    self.push(x.fiber(f, y, xx), gamma.fiber(f, y, xx));
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &FvAccumulator) -> Result<()> {
        if (self.components, self.dim) != (other.components, other.dim) {
            return Err(Error::shape(format!(
                "cannot merge K={} n_c={} with K={} n_c={}",
                self.components, self.dim, other.components, other.dim
            )));
        }
        for (a, b) in self
            .s0
            .iter_mut()
            .chain(&mut self.s1)
            .chain(&mut self.s2)
            .zip(other.s0.iter().chain(&other.s1).chain(&other.s2))
        {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }
}

pub fn merge(a: &FvAccumulator, b: &FvAccumulator) -> Result<FvAccumulator> {
    let mut out = a.clone();
    out.merge(b)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

fn check_params(acc: &FvAccumulator, params: &GmmParams) -> Result<()> {
    if (acc.components, acc.dim) != (params.components, params.dim) {
        return Err(Error::shape(format!(
            "accumulator K={} n_c={} against mixture K={} n_c={}",
            acc.components, acc.dim, params.components, params.dim
        )));
    }
    Ok(())
}

/// Unnormalized Fisher vector from accumulated statistics.
pub fn fv_from_stats(acc: &FvAccumulator, params: &GmmParams) -> Result<FisherVector> {
    check_params(acc, params)?;
    let (k, d) = (acc.components, acc.dim);
    let w = mixture_weights(&params.alpha);
    let t = acc.count as f64;
    let mut values = vec![0.0; fv_dim(k, d)];
    let (gw, rest) = values.split_at_mut(k);
    let (gmu, gsd) = rest.split_at_mut(k * d);
    for c in 0..k {
        let sw = w[c].sqrt();
        gw[c] = (acc.s0[c] - t * w[c]) / sw;
        for i in 0..d {
            let idx = c * d + i;
            let mu = params.means[idx];
            let var = params.log_vars[idx].exp();
            let sd = (0.5 * params.log_vars[idx]).exp();
            gmu[idx] = (acc.s1[idx] - mu * acc.s0[c]) / (sw * sd);
            gsd[idx] = (acc.s2[idx] - 2.0 * mu * acc.s1[idx] + (mu * mu - var) * acc.s0[c])
                / ((2.0 * w[c]).sqrt() * var);
        }
    }
    Ok(FisherVector {
        values,
        normalized: false,
    })
}

/// Signed square root, elementwise. Not idempotent.
pub fn power_normalize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|z| z.signum() * z.abs().sqrt()).map(|z| if z == 0.0 { 0.0 } else { z }).collect()
}

/// `v / max(|v|, 1e-12)`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|z| z * z).sum::<f64>().sqrt();
    let denom = norm.max(L2_EPS);
    v.iter().map(|z| z / denom).collect()
}

/// Intermediate values of [`normalize`], needed by [`normalize_backward`].
#[derive(Debug, Clone)]
pub struct NormCache {
    raw: Vec<f64>,
    normalized: Vec<f64>,
    norm: f64,
    power: bool,
}

/// Optional signed square root then L2 scaling. An all-zero vector stays
/// zero and is not flagged normalized.
pub fn normalize(fv: &FisherVector, power: bool) -> (FisherVector, NormCache) {
    let stage = if power {
        power_normalize(&fv.values)
    } else {
        fv.values.clone()
    };
    let norm = stage.iter().map(|z| z * z).sum::<f64>().sqrt();
    let normalized = l2_normalize(&stage);
    let out = FisherVector {
        values: normalized.clone(),
        normalized: norm > 0.0,
    };
    (
        out,
        NormCache {
            raw: fv.values.clone(),
            normalized,
            norm,
            power,
        },
    )
}

/// Gradient with respect to the unnormalized Fisher vector.
pub fn normalize_backward(upstream: &[f64], cache: &NormCache) -> Vec<f64> {
    let mut g: Vec<f64> = if cache.norm > L2_EPS {
        let dot: f64 = upstream.iter().zip(&cache.normalized).map(|(u, n)| u * n).sum();
        upstream
            .iter()
            .zip(&cache.normalized)
            .map(|(u, n)| (u - n * dot) / cache.norm)
            .collect()
    } else {
        upstream.iter().map(|u| u / L2_EPS).collect()
    };
    if cache.power {
        for (gi, z) in g.iter_mut().zip(&cache.raw) {
            *gi /= 2.0 * (z.abs() + POWER_EPS).sqrt();
        }
    }
    g
}

/// Gradients with respect to the accumulated statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsGrad {
    pub s0: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub dim: usize,
}

/// Back-propagate a gradient on the unnormalized Fisher vector into the
/// statistics and, through the explicit parameter terms, into the mixture.
pub fn stats_backward(upstream: &[f64], acc: &FvAccumulator, params: &GmmParams) -> Result<(StatsGrad, GmmGrads)> {
    check_params(acc, params)?;
    let (k, d) = (acc.components, acc.dim);
    if upstream.len() != fv_dim(k, d) {
        return Err(Error::shape(format!(
            "gradient of length {} for a {}-dim Fisher vector",
            upstream.len(),
            fv_dim(k, d)
        )));
    }
    let w = mixture_weights(&params.alpha);
    let t = acc.count as f64;
    let (uw, rest) = upstream.split_at(k);
    let (umu, usd) = rest.split_at(k * d);
    let mut sg = StatsGrad {
        s0: vec![0.0; k],
        s1: vec![0.0; k * d],
        s2: vec![0.0; k * d],
        dim: d,
    };
    let mut pg = GmmGrads::zeros(k, d);
    let mut dw = vec![0.0; k];
    for c in 0..k {
        let sw = w[c].sqrt();
        let c2 = (2.0 * w[c]).sqrt();
        sg.s0[c] += uw[c] / sw;
        // G_w = S0 w^-1/2 - T w^1/2
        dw[c] += uw[c] * (-0.5 * acc.s0[c] / (w[c] * sw) - 0.5 * t / sw);
        for i in 0..d {
            let idx = c * d + i;
            let mu = params.means[idx];
            let var = params.log_vars[idx].exp();
            let sd = (0.5 * params.log_vars[idx]).exp();
            let (s0, s1, s2) = (acc.s0[c], acc.s1[idx], acc.s2[idx]);
            let g_mu = (s1 - mu * s0) / (sw * sd);
            let g_sd = (s2 - 2.0 * mu * s1 + (mu * mu - var) * s0) / (c2 * var);

            sg.s0[c] += umu[idx] * (-mu / (sw * sd)) + usd[idx] * (mu * mu - var) / (c2 * var);
            sg.s1[idx] += umu[idx] / (sw * sd) - usd[idx] * 2.0 * mu / (c2 * var);
            sg.s2[idx] += usd[idx] / (c2 * var);

            // both blocks scale as w^-1/2
            dw[c] += -0.5 / w[c] * (umu[idx] * g_mu + usd[idx] * g_sd);
            pg.means[idx] += umu[idx] * (-s0 / (sw * sd)) + usd[idx] * (2.0 * mu * s0 - 2.0 * s1) / (c2 * var);
            // d/d logvar: G_mu scales as sigma^-1, G_sd = A/(c sigma²) - S0/c
            pg.log_vars[idx] += umu[idx] * (-0.5 * g_mu) - usd[idx] * (g_sd + s0 / c2);
        }
    }
    let inner: f64 = dw.iter().zip(&w).map(|(g, wk)| g * wk).sum();
    for c in 0..k {
        pg.alpha[c] = w[c] * (dw[c] - inner);
    }
    Ok((sg, pg))
}

impl StatsGrad {
    /// Push the statistics gradient down to the descriptors in `region`:
    /// returns the direct gradient on `x` and the gradient on `gamma`. Fibers
    /// outside the region get zero.
    pub fn fibers_backward(&self, x: &Tensor4, gamma: &Tensor4, region: Option<Region>) -> Result<(Tensor4, Tensor4)> {
        let [n, h, w, d] = x.dims();
        let region = region.unwrap_or(Region::full(h, w));
        check_aligned(x, gamma, &region)?;
        let k = self.s0.len();
        if d != self.dim || gamma.dims()[3] != k {
            return Err(Error::shape("statistics gradient does not match descriptor tensors"));
        }
        let mut dx = Tensor4::zeros(x.dims());
        let mut dgamma = Tensor4::zeros(gamma.dims());
        for f in 0..n {
            for y in region.row..region.row + region.height {
                for xx in region.col..region.col + region.width {
                    let xf = x.fiber(f, y, xx);
                    let gf = gamma.fiber(f, y, xx).to_vec();
                    let mut dxf = vec![0.0; d];
                    let dgf = dgamma.fiber_mut(f, y, xx);
                    for c in 0..k {
                        let s1 = &self.s1[c * d..(c + 1) * d];
                        let s2 = &self.s2[c * d..(c + 1) * d];
                        let mut dg = self.s0[c];
                        for i in 0..d {
                            dg += s1[i] * xf[i] + s2[i] * xf[i] * xf[i];
                            dxf[i] += gf[c] * (s1[i] + 2.0 * s2[i] * xf[i]);
                        }
                        dgf[c] = dg;
                    }
                    dx.fiber_mut(f, y, xx).copy_from_slice(&dxf);
                }
            }
        }
        Ok((dx, dgamma))
    }
}

/// Everything the composite backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct FvCache {
    pub x: Tensor4,
    pub gamma: Tensor4,
    pub region: Option<Region>,
    pub acc: FvAccumulator,
    pub norm: NormCache,
}

/// Descriptors to normalized Fisher vector, through the mixture posteriors.
pub fn fisher_forward(
    x: &Tensor4,
    params: &GmmParams,
    region: Option<Region>,
    power: bool,
) -> Result<(FisherVector, FvCache)> {
    let gamma = posteriors(x, params)?;
    let mut acc = FvAccumulator::new(params.components, params.dim);
    acc.accumulate(x, &gamma, region)?;
    let raw = fv_from_stats(&acc, params)?;
    let (fv, norm) = normalize(&raw, power);
    Ok((
        fv,
        FvCache {
            x: x.clone(),
            gamma,
            region,
            acc,
            norm,
        },
    ))
}

/// Gradient of a loss on the normalized Fisher vector with respect to the
/// descriptors and every mixture parameter, through both the explicit
/// parameter terms and the posteriors.
pub fn fv_backward(upstream: &[f64], cache: &FvCache, params: &GmmParams) -> Result<(Tensor4, GmmGrads)> {
    let draw = normalize_backward(upstream, &cache.norm);
    let (sg, mut grads) = stats_backward(&draw, &cache.acc, params)?;
    let (mut dx, dgamma) = sg.fibers_backward(&cache.x, &cache.gamma, cache.region)?;
    let (dx_post, post_grads) = posteriors_backward(&dgamma, &cache.x, &cache.gamma, params)?;
    for (a, b) in dx.data_mut().iter_mut().zip(dx_post.data()) {
        *a += b;
    }
    grads.add(&post_grads);
    Ok((dx, grads))
}
