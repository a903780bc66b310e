//! Central finite-difference checks of every backward pass.
//!
//! Each check builds a scalar probe loss (a random linear functional of the
//! layer output, or the classifier loss for the full chain), perturbs sampled
//! coordinates by `±h` and compares against the analytic gradient with
//! `|a - n| / max(|a|, |n|, 1e-8)`.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::bundle::{Extractor, ModelBundle};
use crate::error::{Error, Result};
use crate::extract::{extract, extract_backward, extract_cached, ConvExtractorParams};
use crate::fisher::{fisher_forward, fv_backward, fv_dim};
use crate::gmm::{posteriors, posteriors_backward, GmmParams};
use crate::pipeline::{backward, forward, trace_loss, CropSpec};
use crate::pool::{pool, pool_backward, PoolConfig};
use crate::reduce::ProjectionParams;
use crate::rng;
use crate::svm::{encode_label, SvmParams};
use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TOL_POWER: f64 = 1e-3;
pub const TOL_LINEAR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Extractor,
    Pool,
    Projection,
    Gmm,
    Fisher,
    FisherPower,
    Svm,
    Full,
    FullPower,
}

impl Layer {
    pub const ALL: [Layer; 9] = [
        Layer::Extractor,
        Layer::Pool,
        Layer::Projection,
        Layer::Gmm,
        Layer::Fisher,
        Layer::FisherPower,
        Layer::Svm,
        Layer::Full,
        Layer::FullPower,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Extractor => "extractor",
            Layer::Pool => "pool",
            Layer::Projection => "projection",
            Layer::Gmm => "gmm",
            Layer::Fisher => "fisher",
            Layer::FisherPower => "fisher_power",
            Layer::Svm => "svm",
            Layer::Full => "full",
            Layer::FullPower => "full_power",
        }
    }

    /// `"all"` selects every layer.
    pub fn parse_selector(s: &str) -> Option<Vec<Layer>> {
        if s == "all" {
            return Some(Layer::ALL.to_vec());
        }
        Layer::ALL.iter().find(|l| l.as_str() == s).map(|&l| vec![l])
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Layer::Projection => TOL_LINEAR,
            Layer::FisherPower | Layer::FullPower => TOL_POWER,
            _ => TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub layer: Layer,
    /// Which tensor was perturbed.
    pub target: &'static str,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.layer.tolerance()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// A small random network plus one input video to probe it with.
#[derive(Debug, Clone)]
pub struct Probe {
    pub bundle: ModelBundle,
    pub video: Tensor4,
    pub label: usize,
    pub delta_t: usize,
    /// Coordinates sampled per tensor.
    pub max_coords: usize,
    pub seed: u64,
}

impl Probe {
    pub fn random(seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let mut gen = |n: usize, scale: f64| (0..n).map(|_| scale * r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let ext = ConvExtractorParams::random(3, 3, 1, 2, 2, 0.6, rng::derive_seed(seed, 1))?;
        let pool = PoolConfig {
            n_sigma: 2,
            n_tau: 2,
            s_h: 1,
            s_w: 1,
            t: 2,
            delta_s: 1,
        };
        let d = pool.descriptor_dim(3);
        let (n_c, k, m) = (3, 3, 3);
        let projection = ProjectionParams::new(gen(d, 0.1), gen(n_c * d, 1.0), n_c)?;
        let gmm = GmmParams::new(gen(k, 0.5), gen(k * n_c, 0.5), gen(k * n_c, 0.3))?;
        let mut svm = SvmParams::zeros(m, fv_dim(k, n_c), 100.0, 10)?;
        svm.weights = gen(m * fv_dim(k, n_c), 1.0);
        svm.bias = gen(m, 0.3);
        let bundle = ModelBundle::new(Extractor::Conv(ext), pool, projection, gmm, svm, false)?;
        let video = Tensor4::new([4, 12, 12, 1], gen(4 * 12 * 12, 1.0))?;
        Ok(Probe {
            bundle,
            video,
            label: seed as usize % m,
            delta_t: 1,
            max_coords: 24,
            seed,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_like(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Compare `analytic` against central differences of `loss`, where
/// `loss(i, delta)` evaluates the probe with coordinate `i` shifted.
fn compare(
    layer: Layer,
    target: &'static str,
    analytic: &[f64],
    probe: &Probe,
    h: f64,
    salt: u64,
    mut loss: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradReport> {
    let n = analytic.len();
    let take = n.min(probe.max_coords);
    let mut r = rng::stream(probe.seed, salt);
    let mut coords: Vec<usize> = sample(&mut r, n, take).into_vec();
    coords.sort_unstable();
    let mut worst = 0.0f64;
    for &i in &coords {
        let numeric = (loss(i, h)? - loss(i, -h)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(GradReport {
        layer,
        target,
        max_rel_error: worst,
        coords: take,
    })
}

fn shifted(t: &Tensor4, i: usize, delta: f64) -> Tensor4 {
    let mut out = t.clone();
    out.data_mut()[i] += delta;
    out
}

fn conv_params(bundle: &ModelBundle) -> Result<&ConvExtractorParams> {
    match &bundle.extractor {
        Extractor::Conv(p) => Ok(p),
        Extractor::Precomputed { .. } => Err(Error::config("probe bundle has no trainable extractor")),
    }
}

/// Intermediate tensors of the probe video's first window.
struct Stages {
    maps: Tensor4,
    pooled: Tensor4,
    x: Tensor4,
}

fn stages(probe: &Probe) -> Result<Stages> {
    let b = &probe.bundle;
    let maps = extract(&probe.video, conv_params(b)?)?.frames(0, b.pool.t)?;
    let pooled = pool(&maps, &b.pool)?;
    let x = b.projection.project(&pooled)?;
    Ok(Stages { maps, pooled, x })
}

pub fn grad_check(probe: &Probe, layer: Layer, h: f64) -> Result<Vec<GradReport>> {
    let b = &probe.bundle;
    let mut out = Vec::new();
    match layer {
        Layer::Extractor => {
            let ext = conv_params(b)?;
            let (y, cache) = extract_cached(&probe.video, ext)?;
            let r = random_like(y.len(), probe.seed ^ 11);
            let up = Tensor4::new(y.dims(), r.clone())?;
            let (dx, g) = extract_backward(&up, &cache, ext)?;
            let f = |v: &Tensor4, p: &ConvExtractorParams| Ok(dot(&r, extract(v, p)?.data()));
            out.push(compare(layer, "filters", &g.filters, probe, h, 1, |i, d| {
                let mut p = ext.clone();
                p.filters.data_mut()[i] += d;
                f(&probe.video, &p)
            })?);
            out.push(compare(layer, "biases", &g.biases, probe, h, 2, |i, d| {
                let mut p = ext.clone();
                p.biases[i] += d;
                f(&probe.video, &p)
            })?);
            out.push(compare(layer, "input", dx.data(), probe, h, 3, |i, d| {
                f(&shifted(&probe.video, i, d), ext)
            })?);
        }
        Layer::Pool => {
            let s = stages(probe)?;
            let y = pool(&s.maps, &b.pool)?;
            let r = random_like(y.len(), probe.seed ^ 12);
            let dx = pool_backward(&Tensor4::new(y.dims(), r.clone())?, &b.pool, s.maps.dims())?;
            out.push(compare(layer, "input", dx.data(), probe, h, 4, |i, d| {
                Ok(dot(&r, pool(&shifted(&s.maps, i, d), &b.pool)?.data()))
            })?);
        }
        Layer::Projection => {
            // the layer is affine, so a unit step has no truncation error
            // and keeps rounding noise far below the tolerance
            let h = 1.0;
            let s = stages(probe)?;
            let r = random_like(s.x.len(), probe.seed ^ 13);
            let (dx, g) = b.projection.backward(&Tensor4::new(s.x.dims(), r.clone())?, &s.pooled)?;
            let f = |p: &ProjectionParams, v: &Tensor4| Ok(dot(&r, p.project(v)?.data()));
            out.push(compare(layer, "mean", &g.mean, probe, h, 5, |i, d| {
                let mut p = b.projection.clone();
                p.mean[i] += d;
                f(&p, &s.pooled)
            })?);
            out.push(compare(layer, "axes", &g.axes, probe, h, 6, |i, d| {
                let mut p = b.projection.clone();
                p.axes[i] += d;
                f(&p, &s.pooled)
            })?);
            out.push(compare(layer, "input", dx.data(), probe, h, 7, |i, d| {
                f(&b.projection, &shifted(&s.pooled, i, d))
            })?);
        }
        Layer::Gmm => {
            let s = stages(probe)?;
            let gamma = posteriors(&s.x, &b.gmm)?;
            let r = random_like(gamma.len(), probe.seed ^ 14);
            let (dx, g) = posteriors_backward(&Tensor4::new(gamma.dims(), r.clone())?, &s.x, &gamma, &b.gmm)?;
            let f = |p: &GmmParams, v: &Tensor4| Ok(dot(&r, posteriors(v, p)?.data()));
            gmm_param_checks(layer, &mut out, &g, probe, h, |p| f(p, &s.x))?;
            out.push(compare(layer, "input", dx.data(), probe, h, 8, |i, d| {
                f(&b.gmm, &shifted(&s.x, i, d))
            })?);
        }
        Layer::Fisher | Layer::FisherPower => {
            let power = layer == Layer::FisherPower;
            let s = stages(probe)?;
            let (fv, cache) = fisher_forward(&s.x, &b.gmm, None, power)?;
            let r = random_like(fv.values.len(), probe.seed ^ 15);
            let (dx, g) = fv_backward(&r, &cache, &b.gmm)?;
            let f = |p: &GmmParams, v: &Tensor4| Ok(dot(&r, &fisher_forward(v, p, None, power)?.0.values));
            gmm_param_checks(layer, &mut out, &g, probe, h, |p| f(p, &s.x))?;
            out.push(compare(layer, "input", dx.data(), probe, h, 9, |i, d| {
                f(&b.gmm, &shifted(&s.x, i, d))
            })?);
        }
        Layer::Svm => {
            let s = stages(probe)?;
            let (fv, _) = fisher_forward(&s.x, &b.gmm, None, b.power_norm)?;
            let y = encode_label(probe.label, b.classes());
            let (dx, g) = b.svm.loss_backward(&fv.values, &y)?;
            let f = |p: &SvmParams, v: &[f64]| p.loss(v, &y);
            out.push(compare(layer, "weights", &g.weights, probe, h, 10, |i, d| {
                let mut p = b.svm.clone();
                p.weights[i] += d;
                f(&p, &fv.values)
            })?);
            out.push(compare(layer, "bias", &g.bias, probe, h, 11, |i, d| {
                let mut p = b.svm.clone();
                p.bias[i] += d;
                f(&p, &fv.values)
            })?);
            out.push(compare(layer, "input", &dx, probe, h, 12, |i, d| {
                let mut v = fv.values.clone();
                v[i] += d;
                f(&b.svm, &v)
            })?);
        }
        Layer::Full | Layer::FullPower => {
            let mut bundle = b.clone();
            bundle.power_norm = layer == Layer::FullPower;
            let crops = CropSpec::full();
            let trace = forward(&bundle, &probe.video, probe.delta_t, &crops, None)?;
            let grads = backward(&bundle, &trace, probe.label)?;
            let f = |bb: &ModelBundle, v: &Tensor4| {
                trace_loss(bb, &forward(bb, v, probe.delta_t, &crops, None)?, probe.label)
            };
            for (gi, (name, analytic)) in crate::bundle::GROUPS.iter().zip(grads.groups()).enumerate() {
                out.push(compare(layer, name, analytic, probe, h, 20 + gi as u64, |i, d| {
                    let mut bb = bundle.clone();
                    bb.groups_mut()[gi][i] += d;
                    f(&bb, &probe.video)
                })?);
            }
            out.push(compare(layer, "input", grads.input.data(), probe, h, 30, |i, d| {
                f(&bundle, &shifted(&probe.video, i, d))
            })?);
        }
    }
    Ok(out)
}

fn gmm_param_checks(
    layer: Layer,
    out: &mut Vec<GradReport>,
    g: &crate::gmm::GmmGrads,
    probe: &Probe,
    h: f64,
    f: impl Fn(&GmmParams) -> Result<f64>,
) -> Result<()> {
    let base = &probe.bundle.gmm;
    out.push(compare(layer, "alpha", &g.alpha, probe, h, 40, |i, d| {
        let mut p = base.clone();
        p.alpha[i] += d;
        f(&p)
    })?);
    out.push(compare(layer, "means", &g.means, probe, h, 41, |i, d| {
        let mut p = base.clone();
        p.means[i] += d;
        f(&p)
    })?);
    out.push(compare(layer, "log_vars", &g.log_vars, probe, h, 42, |i, d| {
        let mut p = base.clone();
        p.log_vars[i] += d;
        f(&p)
    })?);
    Ok(())
}

/// Run every selected layer and return all reports.
pub fn run(probe: &Probe, layers: &[Layer], h: f64) -> Result<Vec<GradReport>> {
    let mut all = Vec::new();
    for &l in layers {
        all.extend(grad_check(probe, l, h)?);
    }
    Ok(all)
}
