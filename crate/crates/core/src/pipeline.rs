//! Whole-video inference and the matching backward pass.
//!
//! The extractor runs once over the video. A `t`-frame window then slides
//! along time with stride `delta_t`; each window is pooled, projected and
//! soft-assigned, and its statistics are added to one accumulator per crop.
//! Windows start at `0, delta_t, 2·delta_t, ...` while they fit; trailing
//! frames are dropped.

use rayon::prelude::*;

use crate::bundle::{Extractor, ModelBundle};
use crate::error::{Error, Result};
use crate::extract::{extract_backward, extract_cached, ExtractCache, ExtractorGrads};
use crate::fisher::{fv_from_stats, normalize, normalize_backward, stats_backward, FisherVector, FvAccumulator, NormCache, Region};
use crate::gmm::{posteriors, posteriors_backward, GmmGrads};
use crate::pool::{pool, pool_backward};
use crate::reduce::ProjectionGrads;
use crate::svm::{average_scores, encode_label, predict, SvmGrads};
use crate::tensor::Tensor4;
use crate::train::DropoutMask;

/// Spatial crops in posterior-grid coordinates. The full grid is always the
/// first crop; listed rectangles equal to it are not repeated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CropSpec {
    pub regions: Vec<Region>,
}

impl CropSpec {
    pub fn full() -> Self {
        CropSpec::default()
    }

    pub fn new(regions: Vec<Region>) -> Self {
        CropSpec { regions }
    }

    pub fn resolve(&self, height: usize, width: usize) -> Result<Vec<Region>> {
        let full = Region::full(height, width);
        let mut out = vec![full];
        for r in &self.regions {
            if r.is_empty() || !r.fits(height, width) {
                return Err(Error::Validation(format!(
                    "crop {r:?} outside the {height}x{width} descriptor grid"
                )));
            }
            if *r != full {
                out.push(*r);
            }
        }
        Ok(out)
    }
}

/// Start frames of every full window.
pub fn window_starts(frames: usize, t: usize, delta_t: usize) -> Vec<usize> {
    if frames < t || delta_t == 0 {
        return Vec::new();
    }
    (0..=frames - t).step_by(delta_t).collect()
}

/// Input-space box `(offsets, sizes)` whose classification equals classifying
/// `region` of the full input. Spans all frames and channels.
pub fn input_crop(bundle: &ModelBundle, video_dims: [usize; 4], region: Region) -> ([usize; 4], [usize; 4]) {
    let p = &bundle.pool;
    let (eh, ew) = p.window_extent();
    let map_rows = (region.row * p.delta_s, (region.height - 1) * p.delta_s + eh);
    let map_cols = (region.col * p.delta_s, (region.width - 1) * p.delta_s + ew);
    let ((r0, rh), (c0, cw)) = match &bundle.extractor {
        Extractor::Conv(e) => {
            let [_, kh, kw, _] = e.filters.dims();
            (e.input_span(map_rows.0, map_rows.1, kh), e.input_span(map_cols.0, map_cols.1, kw))
        }
        Extractor::Precomputed { .. } => (map_rows, map_cols),
    };
    ([0, r0, c0, 0], [video_dims[0], rh, cw, video_dims[3]])
}

#[derive(Debug, Clone)]
struct WindowTrace {
    start: usize,
    pooled: Tensor4,
    x: Tensor4,
    gamma: Tensor4,
}

/// Everything recorded by a forward pass over one video.
#[derive(Debug, Clone)]
pub struct VideoTrace {
    pub crops: Vec<Region>,
    pub accumulators: Vec<FvAccumulator>,
    /// Normalized Fisher vector per crop.
    pub fvs: Vec<FisherVector>,
    pub scores: Vec<Vec<f64>>,
    maps_dims: [usize; 4],
    extract: Option<ExtractCache>,
    dropout: Option<DropoutMask>,
    windows: Vec<WindowTrace>,
    norms: Vec<NormCache>,
}

fn finite(t: &Tensor4, layer: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Run the network over one video. `dropout` is applied to the feature maps
/// when given, as `(drop probability, seed)`.
pub fn forward(
    bundle: &ModelBundle,
    video: &Tensor4,
    delta_t: usize,
    crops: &CropSpec,
    dropout: Option<(f64, u64)>,
) -> Result<VideoTrace> {
    let t = bundle.pool.t;
    let frames = video.dims()[0];
    if frames < t {
        return Err(Error::Validation(format!("video has {frames} frames, the window needs {t}")));
    }
    if delta_t == 0 {
        return Err(Error::config("temporal stride must be positive"));
    }
    let (maps, extract) = match &bundle.extractor {
        Extractor::Conv(p) => {
            let (m, c) = extract_cached(video, p)?;
            (m, Some(c))
        }
        Extractor::Precomputed { channels } => {
            if video.dims()[3] != *channels {
                return Err(Error::shape(format!(
                    "precomputed features have {} channels, bundle expects {channels}",
                    video.dims()[3]
                )));
            }
            (video.clone(), None)
        }
    };
    finite(&maps, "extractor")?;
    let (maps, dropout) = match dropout {
        Some((p, seed)) if p > 0.0 => {
            let (m, mask) = crate::train::dropout_forward(&maps, p, seed, true);
            (m, Some(mask))
        }
        _ => (maps, None),
    };
    let [_, f_h, f_w, _] = maps.dims();
    let (gh, gw) = bundle.pool.output_dims(f_h, f_w)?;
    let regions = crops.resolve(gh, gw)?;

    let windows = window_starts(frames, t, delta_t)
        .into_par_iter()
        .map(|start| -> Result<WindowTrace> {
            let pooled = pool(&maps.frames(start, t)?, &bundle.pool)?;
            finite(&pooled, "pooling")?;
            let x = bundle.projection.project(&pooled)?;
            finite(&x, "projection")?;
            let gamma = posteriors(&x, &bundle.gmm)?;
            finite(&gamma, "gmm")?;
            Ok(WindowTrace { start, pooled, x, gamma })
        })
        .collect::<Result<Vec<_>>>()?;

    let (k, n_c) = (bundle.gmm.components, bundle.gmm.dim);
    let mut accumulators = Vec::with_capacity(regions.len());
    let mut fvs = Vec::with_capacity(regions.len());
    let mut norms = Vec::with_capacity(regions.len());
    let mut scores = Vec::with_capacity(regions.len());
    for region in &regions {
        let mut acc = FvAccumulator::new(k, n_c);
        for w in &windows {
            acc.accumulate(&w.x, &w.gamma, Some(*region))?;
        }
        let raw = fv_from_stats(&acc, &bundle.gmm)?;
        if !raw.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: "fisher" });
        }
        let (fv, norm) = normalize(&raw, bundle.power_norm);
        let s = bundle.svm.scores(&fv.values)?;
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: "classifier" });
        }
        accumulators.push(acc);
        fvs.push(fv);
        norms.push(norm);
        scores.push(s);
    }
    Ok(VideoTrace {
        crops: regions,
        accumulators,
        fvs,
        scores,
        maps_dims: maps.dims(),
        extract,
        dropout,
        windows,
        norms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: usize,
    /// Normalized Fisher vector of each crop, full grid first.
    pub fvs: Vec<FisherVector>,
    /// Scores averaged over crops.
    pub scores: Vec<f64>,
}

pub fn classify_video(bundle: &ModelBundle, video: &Tensor4, delta_t: usize, crops: &CropSpec) -> Result<Classification> {
    let trace = forward(bundle, video, delta_t, crops, None)?;
    Ok(Classification {
        class: predict(&trace.scores)?,
        scores: average_scores(&trace.scores)?,
        fvs: trace.fvs,
    })
}

/// Gradients for every parameter group, in bundle group order.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrads {
    pub extractor: Option<ExtractorGrads>,
    pub projection: ProjectionGrads,
    pub gmm: GmmGrads,
    pub svm: SvmGrads,
    /// Gradient with respect to the input video (or features).
    pub input: Tensor4,
}

impl BundleGrads {
    pub fn groups(&self) -> [&[f64]; 9] {
        let (f, b): (&[f64], &[f64]) = match &self.extractor {
            Some(g) => (&g.filters, &g.biases),
            None => (&[], &[]),
        };
        [
            f,
            b,
            &self.projection.mean,
            &self.projection.axes,
            &self.gmm.alpha,
            &self.gmm.means,
            &self.gmm.log_vars,
            &self.svm.weights,
            &self.svm.bias,
        ]
    }
}

/// Classifier loss of the full-grid crop against `label`.
pub fn trace_loss(bundle: &ModelBundle, trace: &VideoTrace, label: usize) -> Result<f64> {
    bundle.svm.loss(&trace.fvs[0].values, &encode_label(label, bundle.classes()))
}

/// Backward pass of [`trace_loss`] through every layer.
pub fn backward(bundle: &ModelBundle, trace: &VideoTrace, label: usize) -> Result<BundleGrads> {
    let y = encode_label(label, bundle.classes());
    let (dfv, svm) = bundle.svm.loss_backward(&trace.fvs[0].values, &y)?;
    let draw = normalize_backward(&dfv, &trace.norms[0]);
    let (sg, mut gmm) = stats_backward(&draw, &trace.accumulators[0], &bundle.gmm)?;
    let region = Some(trace.crops[0]);

    let per_window = trace
        .windows
        .par_iter()
        .map(|w| -> Result<(Tensor4, ProjectionGrads, GmmGrads)> {
            let (mut dx, dgamma) = sg.fibers_backward(&w.x, &w.gamma, region)?;
            let (dx_post, g) = posteriors_backward(&dgamma, &w.x, &w.gamma, &bundle.gmm)?;
            for (a, b) in dx.data_mut().iter_mut().zip(dx_post.data()) {
                *a += b;
            }
            let (dpooled, pg) = bundle.projection.backward(&dx, &w.pooled)?;
            let [_, f_h, f_w, d] = trace.maps_dims;
            let dmaps = pool_backward(&dpooled, &bundle.pool, [bundle.pool.t, f_h, f_w, d])?;
            Ok((dmaps, pg, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut dmaps = Tensor4::zeros(trace.maps_dims);
    let mut projection = ProjectionGrads {
        mean: vec![0.0; bundle.projection.mean.len()],
        axes: vec![0.0; bundle.projection.axes.len()],
    };
    // fixed-order reduction keeps results independent of thread scheduling
    for (w, (dm, pg, g)) in trace.windows.iter().zip(per_window) {
        let frame = dm.len() / bundle.pool.t;
        let base = w.start * frame;
        for (a, b) in dmaps.data_mut()[base..base + dm.len()].iter_mut().zip(dm.data()) {
            *a += b;
        }
        for (a, b) in projection.mean.iter_mut().zip(&pg.mean) {
            *a += b;
        }
        for (a, b) in projection.axes.iter_mut().zip(&pg.axes) {
            *a += b;
        }
        gmm.add(&g);
    }
    if let Some(mask) = &trace.dropout {
        dmaps = mask.backward(&dmaps);
    }
    let (input, extractor) = match (&bundle.extractor, &trace.extract) {
        (Extractor::Conv(p), Some(cache)) => {
            let (dx, g) = extract_backward(&dmaps, cache, p)?;
            (dx, Some(g))
        }
        (Extractor::Conv(_), None) => return Err(Error::MissingCache("extractor")),
        (Extractor::Precomputed { .. }, _) => (dmaps, None),
    };
    Ok(BundleGrads {
        extractor,
        projection,
        gmm,
        svm,
        input,
    })
}
