//! Spatio-temporal mean pooling of `t` feature maps into local descriptors.
//!
//! Each grid position covers an `n_sigma·S_h x n_sigma·S_w x t` block of the
//! input, split into `n_sigma x n_sigma x n_tau` cells of `S_h x S_w x t/n_tau`
//! entries. Every cell is mean-pooled per channel and the cells are
//! concatenated temporal-major, then cell row, then cell column, then channel:
//!
//! ```text
//! index = ((tau * n_sigma + row) * n_sigma + col) * d + channel
//! ```
//!
//! Grid positions advance by `delta_s` in both spatial directions, so the
//! output has `F_h' = (F_h - n_sigma·S_h) / delta_s + 1` rows (and likewise
//! for columns).

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolConfig {
    pub n_sigma: usize,
    pub n_tau: usize,
    pub s_h: usize,
    pub s_w: usize,
    /// Frames per window.
    pub t: usize,
    pub delta_s: usize,
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        let PoolConfig {
            n_sigma,
            n_tau,
            s_h,
            s_w,
            t,
            delta_s,
        } = *self;
        if n_sigma == 0 || n_tau == 0 || s_h == 0 || s_w == 0 || t == 0 || delta_s == 0 {
            return Err(Error::config(format!("pooling parameters must be positive: {self:?}")));
        }
        if t % n_tau != 0 {
            return Err(Error::config(format!(
                "window of {t} frames is not divisible into {n_tau} temporal cells"
            )));
        }
        Ok(())
    }

    /// `D = n_sigma² · n_tau · d`.
    pub fn descriptor_dim(&self, channels: usize) -> usize {
        self.n_sigma * self.n_sigma * self.n_tau * channels
    }

    pub fn window_extent(&self) -> (usize, usize) {
        (self.n_sigma * self.s_h, self.n_sigma * self.s_w)
    }

    pub fn output_dims(&self, f_h: usize, f_w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.window_extent();
        if f_h < eh || f_w < ew {
            return Err(Error::shape(format!(
                "pooling window {eh}x{ew} larger than feature map {f_h}x{f_w}"
            )));
        }
        Ok(((f_h - eh) / self.delta_s + 1, (f_w - ew) / self.delta_s + 1))
    }

    fn cell_volume(&self) -> usize {
        self.s_h * self.s_w * (self.t / self.n_tau)
    }
}

/// Free function form of [`PoolConfig::output_dims`].
pub fn output_dims(f_h: usize, f_w: usize, cfg: &PoolConfig) -> Result<(usize, usize)> {
    cfg.output_dims(f_h, f_w)
}

/// Pool `(t, F_h, F_w, d)` maps into a `(1, F_h', F_w', D)` descriptor tensor.
pub fn pool(maps: &Tensor4, cfg: &PoolConfig) -> Result<Tensor4> {
    let [t, f_h, f_w, d] = maps.dims();
    if t != cfg.t {
        return Err(Error::shape(format!("pooling expects {} frames, got {t}", cfg.t)));
    }
    let (oh, ow) = cfg.output_dims(f_h, f_w)?;
    let dim = cfg.descriptor_dim(d);
    let mut out = Tensor4::zeros([1, oh, ow, dim]);
    for gy in 0..oh {
        for gx in 0..ow {
            let o = out.offset(0, gy, gx, 0);
            pool_position(maps, cfg, gy * cfg.delta_s, gx * cfg.delta_s, &mut out.data_mut()[o..o + dim]);
        }
    }
    Ok(out)
}

/// Pool the single block whose top-left corner is `(row, col)` of the maps.
pub fn pool_position(maps: &Tensor4, cfg: &PoolConfig, row: usize, col: usize, out: &mut [f64]) {
    let d = maps.dims()[3];
    let frames_per_cell = cfg.t / cfg.n_tau;
    let scale = 1.0 / cfg.cell_volume() as f64;
    out.iter_mut().for_each(|v| *v = 0.0);
    for tau in 0..cfg.n_tau {
        for cr in 0..cfg.n_sigma {
            for cc in 0..cfg.n_sigma {
                let cell = ((tau * cfg.n_sigma + cr) * cfg.n_sigma + cc) * d;
                let acc = &mut out[cell..cell + d];
                for f in tau * frames_per_cell..(tau + 1) * frames_per_cell {
                    for y in row + cr * cfg.s_h..row + (cr + 1) * cfg.s_h {
                        for x in col + cc * cfg.s_w..col + (cc + 1) * cfg.s_w {
                            for (a, v) in acc.iter_mut().zip(maps.fiber(f, y, x)) {
                                *a += v;
                            }
                        }
                    }
                }
                acc.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
}

/// Adjoint of [`pool`]: scatter each descriptor gradient back over its cell,
/// scaled by `1 / cell volume`.
pub fn pool_backward(upstream: &Tensor4, cfg: &PoolConfig, input_dims: [usize; 4]) -> Result<Tensor4> {
    let [t, f_h, f_w, d] = input_dims;
    if t != cfg.t {
        return Err(Error::shape(format!("pooling expects {} frames, got {t}", cfg.t)));
    }
    let (oh, ow) = cfg.output_dims(f_h, f_w)?;
    let dim = cfg.descriptor_dim(d);
    if upstream.dims() != [1, oh, ow, dim] {
        return Err(Error::shape(format!(
            "upstream {:?} does not match pooled output {:?}",
            upstream.dims(),
            [1, oh, ow, dim]
        )));
    }
    let frames_per_cell = cfg.t / cfg.n_tau;
    let scale = 1.0 / cfg.cell_volume() as f64;
    let mut grad = Tensor4::zeros(input_dims);
    for gy in 0..oh {
        for gx in 0..ow {
            let (row, col) = (gy * cfg.delta_s, gx * cfg.delta_s);
            let g = upstream.fiber(0, gy, gx);
            for tau in 0..cfg.n_tau {
                for cr in 0..cfg.n_sigma {
                    for cc in 0..cfg.n_sigma {
                        let cell = ((tau * cfg.n_sigma + cr) * cfg.n_sigma + cc) * d;
                        let gc = &g[cell..cell + d];
                        for f in tau * frames_per_cell..(tau + 1) * frames_per_cell {
                            for y in row + cr * cfg.s_h..row + (cr + 1) * cfg.s_h {
                                for x in col + cc * cfg.s_w..col + (cc + 1) * cfg.s_w {
                                    for (a, v) in grad.fiber_mut(f, y, x).iter_mut().zip(gc) {
                                        *a += scale * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}
