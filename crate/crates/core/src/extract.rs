//! Per-frame local feature extraction.
//!
//! Frames are first local-contrast normalized ([`lcn`], a fixed preprocessing
//! step), then passed through one trainable convolution, a rectified-linear
//! activation and mean pooling. The activation is the single swappable point
//! of this layer; see [`relu`] and [`relu_grad`].

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor4;

pub const LCN_WINDOW: usize = 9;
pub const LCN_EPS: f64 = 1e-6;

/// Local contrast normalization of every frame and channel independently:
/// `(v - local mean) / (local std + 1e-6)` over a 9x9 window clipped at the
/// frame border. The std is the population (1/n) standard deviation.
pub fn lcn(frames: &Tensor4) -> Tensor4 {
    let [n, h, w, c] = frames.dims();
    let half = LCN_WINDOW / 2;
    let mut out = Tensor4::zeros(frames.dims());
    for f in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(half), (y + half + 1).min(h));
                for x in 0..w {
                    let (x0, x1) = (x.saturating_sub(half), (x + half + 1).min(w));
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    // shifted by the centre value so constant windows are exact
                    let centre = frames.get(f, y, x, ch);
                    let mut sum = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            sum += frames.get(f, yy, xx, ch) - centre;
                        }
                    }
                    let mean = centre + sum / count;
                    let mut sq = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let d = frames.get(f, yy, xx, ch) - mean;
                            sq += d * d;
                        }
                    }
                    let std = (sq / count).sqrt();
                    out.set(f, y, x, ch, (frames.get(f, y, x, ch) - mean) / (std + LCN_EPS));
                }
            }
        }
    }
    out
}

#[inline]
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
pub fn relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvExtractorParams {
    /// `(d, k_h, k_w, in_channels)`.
    pub filters: Tensor4,
    pub biases: Vec<f64>,
    pub pool_window: usize,
    pub pool_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorGrads {
    pub filters: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExtractCache {
    input: Tensor4,
    preact: Tensor4,
}

impl ConvExtractorParams {
    pub fn new(filters: Tensor4, biases: Vec<f64>, pool_window: usize, pool_stride: usize) -> Result<Self> {
        let p = ConvExtractorParams {
            filters,
            biases,
            pool_window,
            pool_stride,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero-mean Gaussian filters with standard deviation `std`, zero biases.
    pub fn random(
        channels: usize,
        kernel: usize,
        in_channels: usize,
        pool_window: usize,
        pool_stride: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("filter std: {e}")))?;
        let mut rng = rng::seeded(seed);
        let filters = Tensor4::from_fn([channels, kernel, kernel, in_channels], |_| normal.sample(&mut rng));
        Self::new(filters, vec![0.0; channels], pool_window, pool_stride)
    }

    pub fn validate(&self) -> Result<()> {
        let [d, kh, kw, _] = self.filters.dims();
        if d == 0 {
            return Err(Error::config("extractor needs at least one filter"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!("filter size {kh}x{kw} must be odd")));
        }
        if self.biases.len() != d {
            return Err(Error::shape(format!("{} biases for {d} filters", self.biases.len())));
        }
        if self.pool_window == 0 || self.pool_stride == 0 {
            return Err(Error::config("pool window and stride must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.filters.dims()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let [_, kh, kw, _] = self.filters.dims();
        (kh, kw)
    }

    pub fn in_channels(&self) -> usize {
        self.filters.dims()[3]
    }

    pub fn parameter_count(&self) -> usize {
        self.filters.len() + self.biases.len()
    }

    fn conv_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        if h < kh || w < kw {
            return Err(Error::shape(format!("frame {h}x{w} smaller than filter {kh}x{kw}")));
        }
        Ok((h - kh + 1, w - kw + 1))
    }

    /// Spatial size of the extracted maps for `h x w` frames.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ch, cw) = self.conv_dims(h, w)?;
        if ch < self.pool_window || cw < self.pool_window {
            return Err(Error::shape(format!(
                "conv output {ch}x{cw} smaller than pool window {}",
                self.pool_window
            )));
        }
        Ok((
            (ch - self.pool_window) / self.pool_stride + 1,
            (cw - self.pool_window) / self.pool_stride + 1,
        ))
    }

    /// Pixel extent `(offset, size)` along one axis that produces feature rows
    /// `first .. first + count`.
    pub fn input_span(&self, first: usize, count: usize, kernel: usize) -> (usize, usize) {
        let offset = first * self.pool_stride;
        let size = (count - 1) * self.pool_stride + self.pool_window + kernel - 1;
        (offset, size)
    }
}

fn check_input(frames: &Tensor4, params: &ConvExtractorParams) -> Result<()> {
    let cin = frames.dims()[3];
    if cin != params.in_channels() {
        return Err(Error::shape(format!(
            "frames have {cin} channels, filters expect {}",
            params.in_channels()
        )));
    }
    Ok(())
}

fn convolve(frames: &Tensor4, params: &ConvExtractorParams) -> Result<Tensor4> {
    check_input(frames, params)?;
    let [n, h, w, cin] = frames.dims();
    let (ch, cw) = params.conv_dims(h, w)?;
    let [d, kh, kw, _] = params.filters.dims();
    let filt = params.filters.data();
    let mut pre = Tensor4::zeros([n, ch, cw, d]);
    let input = frames.data();
    for f in 0..n {
        for y in 0..ch {
            for x in 0..cw {
                let base = pre.offset(f, y, x, 0);
                let out = &mut pre.data_mut()[base..base + d];
                out.copy_from_slice(&params.biases);
                for i in 0..kh {
                    for j in 0..kw {
                        let in_off = ((f * h + y + i) * w + x + j) * cin;
                        let patch = &input[in_off..in_off + cin];
                        for (o, out_v) in out.iter_mut().enumerate() {
                            let f_off = ((o * kh + i) * kw + j) * cin;
                            let mut acc = 0.0;
                            for (a, b) in patch.iter().zip(&filt[f_off..f_off + cin]) {
                                acc += a * b;
                            }
                            *out_v += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(pre)
}

fn mean_pool(act: &Tensor4, window: usize, stride: usize, out_h: usize, out_w: usize) -> Tensor4 {
    let [n, _, _, d] = act.dims();
    let scale = 1.0 / (window * window) as f64;
    let mut out = Tensor4::zeros([n, out_h, out_w, d]);
    for f in 0..n {
        for py in 0..out_h {
            for px in 0..out_w {
                let o = out.offset(f, py, px, 0);
                for a in 0..window {
                    for b in 0..window {
                        let src = act.fiber(f, py * stride + a, px * stride + b);
                        for (c, v) in src.iter().enumerate() {
                            out.data_mut()[o + c] += relu(*v);
                        }
                    }
                }
                for v in &mut out.data_mut()[o..o + d] {
                    *v *= scale;
                }
            }
        }
    }
    out
}

/// Valid convolution, ReLU, then mean pooling: `(L, H, W, c)` frames to
/// `(L, F_h, F_w, d)` maps.
pub fn extract(frames: &Tensor4, params: &ConvExtractorParams) -> Result<Tensor4> {
    Ok(extract_cached(frames, params)?.0)
}

pub fn extract_cached(frames: &Tensor4, params: &ConvExtractorParams) -> Result<(Tensor4, ExtractCache)> {
    let [_, h, w, _] = frames.dims();
    let (oh, ow) = params.output_dims(h, w)?;
    let pre = convolve(frames, params)?;
    let out = mean_pool(&pre, params.pool_window, params.pool_stride, oh, ow);
    Ok((
        out,
        ExtractCache {
            input: frames.clone(),
            preact: pre,
        },
    ))
}

pub fn extract_backward(
    upstream: &Tensor4,
    cache: &ExtractCache,
    params: &ConvExtractorParams,
) -> Result<(Tensor4, ExtractorGrads)> {
    let [n, h, w, cin] = cache.input.dims();
    let [_, ch, cw, d] = cache.preact.dims();
    let (oh, ow) = params.output_dims(h, w)?;
    if upstream.dims() != [n, oh, ow, d] || cin != params.in_channels() || d != params.channels() {
        return Err(Error::shape(format!(
            "upstream {:?} does not match cached forward output {:?}",
            upstream.dims(),
            [n, oh, ow, d]
        )));
    }
    let (win, stride) = (params.pool_window, params.pool_stride);
    let scale = 1.0 / (win * win) as f64;

    // through the mean pool and the activation
    let mut dpre = Tensor4::zeros([n, ch, cw, d]);
    for f in 0..n {
        for py in 0..oh {
            for px in 0..ow {
                let g = upstream.fiber(f, py, px);
                for a in 0..win {
                    for b in 0..win {
                        let (y, x) = (py * stride + a, px * stride + b);
                        let o = dpre.offset(f, y, x, 0);
                        let pre = cache.preact.fiber(f, y, x);
                        for c in 0..d {
                            dpre.data_mut()[o + c] += scale * g[c] * relu_grad(pre[c]);
                        }
                    }
                }
            }
        }
    }

    let [_, kh, kw, _] = params.filters.dims();
    let filt = params.filters.data();
    let input = cache.input.data();
    let mut dfilt = vec![0.0; params.filters.len()];
    let mut dbias = vec![0.0; d];
    let mut dinput = Tensor4::zeros(cache.input.dims());
    for f in 0..n {
        for y in 0..ch {
            for x in 0..cw {
                let g = dpre.fiber(f, y, x);
                for (o, gv) in g.iter().enumerate() {
                    dbias[o] += gv;
                }
                for i in 0..kh {
                    for j in 0..kw {
                        let in_off = ((f * h + y + i) * w + x + j) * cin;
                        for (o, &gv) in g.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let f_off = ((o * kh + i) * kw + j) * cin;
                            for c in 0..cin {
                                dfilt[f_off + c] += gv * input[in_off + c];
                                dinput.data_mut()[in_off + c] += gv * filt[f_off + c];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        dinput,
        ExtractorGrads {
            filters: dfilt,
            biases: dbias,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let mut r = rng::seeded(seed);
        Tensor4::from_fn(dims, |_| r.random_range(-1.0..1.0))
    }

    fn naive_lcn(frame: &Tensor4) -> Tensor4 {
        let [_, h, w, _] = frame.dims();
        Tensor4::from_fn(frame.dims(), |[n, y, x, c]| {
            let mut vals = Vec::new();
            for yy in 0..h as i64 {
                for xx in 0..w as i64 {
                    if (yy - y as i64).abs() <= 4 && (xx - x as i64).abs() <= 4 {
                        vals.push(frame.get(n, yy as usize, xx as usize, c));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (frame.get(n, y, x, c) - m) / (var.sqrt() + 1e-6)
        })
    }

    fn naive_extract(frames: &Tensor4, p: &ConvExtractorParams) -> Tensor4 {
        let [n, h, w, cin] = frames.dims();
        let [d, kh, kw, _] = p.filters.dims();
        let (ch, cw) = (h - kh + 1, w - kw + 1);
        let conv = Tensor4::from_fn([n, ch, cw, d], |[f, y, x, o]| {
            let mut s = p.biases[o];
            for i in 0..kh {
                for j in 0..kw {
                    for c in 0..cin {
                        s += frames.get(f, y + i, x + j, c) * p.filters.get(o, i, j, c);
                    }
                }
            }
            s.max(0.0)
        });
        let oh = (ch - p.pool_window) / p.pool_stride + 1;
        let ow = (cw - p.pool_window) / p.pool_stride + 1;
        Tensor4::from_fn([n, oh, ow, d], |[f, y, x, o]| {
            let mut s = 0.0;
            for a in 0..p.pool_window {
                for b in 0..p.pool_window {
                    s += conv.get(f, y * p.pool_stride + a, x * p.pool_stride + b, o);
                }
            }
            s / (p.pool_window * p.pool_window) as f64
        })
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn lcn_of_constant_is_zero() {
        let t = Tensor4::filled([1, 12, 12, 1], 3.7);
        assert!(lcn(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lcn_matches_naive_window() {
        let t = random_tensor([1, 16, 16, 1], 1);
        assert!(max_abs_diff(lcn(&t).data(), naive_lcn(&t).data()) < 1e-12);
    }

    #[test]
    fn lcn_numerator_is_locally_centered() {
        // Interior pixels: reconstructing the centered numerator from the
        // output and summing it over the window around that pixel gives zero.
        let t = random_tensor([1, 16, 16, 1], 2);
        let out = lcn(&t);
        for y in 4..12 {
            for x in 4..12 {
                let mut vals = Vec::new();
                for yy in y - 4..=y + 4 {
                    for xx in x - 4..=x + 4 {
                        vals.push(t.get(0, yy, xx, 0));
                    }
                }
                let m = vals.iter().sum::<f64>() / 81.0;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 81.0).sqrt();
                let centered: f64 = vals.iter().map(|v| v - m).sum();
                assert!((centered / 81.0).abs() < 1e-9);
                assert!((out.get(0, y, x, 0) * (sd + LCN_EPS) + m - t.get(0, y, x, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_filter_passes_input_through() {
        let mut filters = Tensor4::zeros([1, 3, 3, 1]);
        filters.set(0, 1, 1, 0, 1.0);
        let p = ConvExtractorParams::new(filters, vec![0.0], 1, 1).unwrap();
        let frames = Tensor4::from_fn([2, 6, 6, 1], |[n, y, x, _]| (n * 36 + y * 6 + x) as f64);
        let out = extract(&frames, &p).unwrap();
        let expected = frames.crop([0, 1, 1, 0], [2, 4, 4, 1]).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn zero_filters_give_zero_maps() {
        let p = ConvExtractorParams::new(Tensor4::zeros([3, 5, 5, 1]), vec![0.0; 3], 2, 2).unwrap();
        let out = extract(&random_tensor([2, 12, 12, 1], 3), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_convolution() {
        let mut p = ConvExtractorParams::random(4, 3, 2, 2, 2, 0.5, 9).unwrap();
        p.biases = vec![0.1, -0.2, 0.05, 0.0];
        let frames = random_tensor([3, 11, 9, 2], 4);
        let out = extract(&frames, &p).unwrap();
        let oracle = naive_extract(&frames, &p);
        assert_eq!(out.dims(), oracle.dims());
        assert!(max_abs_diff(out.data(), oracle.data()) < 1e-10);
    }

    #[test]
    fn rejects_small_frames_and_even_kernels() {
        let p = ConvExtractorParams::random(2, 5, 1, 1, 1, 0.1, 0).unwrap();
        assert!(matches!(extract(&Tensor4::zeros([1, 4, 8, 1]), &p), Err(Error::Shape(_))));
        assert!(ConvExtractorParams::new(Tensor4::zeros([1, 4, 4, 1]), vec![0.0], 1, 1).is_err());
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = ConvExtractorParams::random(2, 3, 1, 2, 2, 0.5, 5).unwrap();
        let frames = random_tensor([2, 10, 10, 1], 6);
        let (out, cache) = extract_cached(&frames, &p).unwrap();
        let zero = Tensor4::zeros(out.dims());
        let (dx0, g0) = extract_backward(&zero, &cache, &p).unwrap();
        assert!(dx0.data().iter().all(|&v| v == 0.0));
        assert!(g0.filters.iter().chain(&g0.biases).all(|&v| v == 0.0));

        let up = random_tensor(out.dims(), 7);
        let mut up2 = up.clone();
        up2.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let (dx1, g1) = extract_backward(&up, &cache, &p).unwrap();
        let (dx2, g2) = extract_backward(&up2, &cache, &p).unwrap();
        for (a, b) in dx1.data().iter().zip(dx2.data()) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in g1.filters.iter().zip(&g2.filters) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let p = ConvExtractorParams::random(2, 3, 1, 1, 1, 0.5, 5).unwrap();
        let (_, cache) = extract_cached(&random_tensor([1, 6, 6, 1], 1), &p).unwrap();
        assert!(extract_backward(&Tensor4::zeros([1, 3, 3, 2]), &cache, &p).is_err());
    }

    #[test]
    fn finite_difference_check() {
        let mut p = ConvExtractorParams::random(2, 3, 1, 1, 1, 0.5, 21).unwrap();
        p.biases = vec![0.05, -0.03];
        let frames = random_tensor([1, 8, 8, 1], 22);
        let (out, cache) = extract_cached(&frames, &p).unwrap();
        let probe = random_tensor(out.dims(), 23);
        let loss = |fr: &Tensor4, pp: &ConvExtractorParams| -> f64 {
            let o = extract(fr, pp).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (dx, g) = extract_backward(&probe, &cache, &p).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        let mut worst: f64 = 0.0;
        for i in 0..frames.len() {
            let (mut plus, mut minus) = (frames.clone(), frames.clone());
            plus.data_mut()[i] += h;
            minus.data_mut()[i] -= h;
            let num = (loss(&plus, &p) - loss(&minus, &p)) / (2.0 * h);
            worst = worst.max(rel(dx.data()[i], num));
        }
        for i in 0..p.filters.len() {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus.filters.data_mut()[i] += h;
            minus.filters.data_mut()[i] -= h;
            let num = (loss(&frames, &plus) - loss(&frames, &minus)) / (2.0 * h);
            worst = worst.max(rel(g.filters[i], num));
        }
        for i in 0..2 {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus.biases[i] += h;
            minus.biases[i] -= h;
            let num = (loss(&frames, &plus) - loss(&frames, &minus)) / (2.0 * h);
            worst = worst.max(rel(g.biases[i], num));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
