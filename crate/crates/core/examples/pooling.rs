//! Spatio-temporal pooling of a feature-map block into local descriptors.

use fvnet::pool::{pool, PoolConfig};
use fvnet::Tensor4;

fn main() -> fvnet::Result<()> {
    let cfg = PoolConfig {
        n_sigma: 2,
        n_tau: 3,
        s_h: 3,
        s_w: 3,
        t: 15,
        delta_s: 2,
    };
    // 15 frames of 14x14 maps with 8 channels; channel c holds the frame index
    let maps = Tensor4::from_fn([15, 14, 14, 8], |[f, _, _, c]| if c == 0 { f as f64 } else { 0.0 });
    let out = pool(&maps, &cfg)?;
    let [_, gh, gw, dim] = out.dims();
    println!("grid {gh}x{gw}, descriptor dimension {dim}");
    // channel 0 of each temporal cell is the mean frame index of that cell
    let fiber = out.fiber(0, 0, 0);
    for tau in 0..cfg.n_tau {
        let idx = (tau * cfg.n_sigma * cfg.n_sigma) * 8;
        println!("temporal cell {tau}: mean frame {}", fiber[idx]);
    }
    Ok(())
}
