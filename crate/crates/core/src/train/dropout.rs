//! Inverted dropout: survivors are scaled by `1 / (1 - p)` during training so
//! inference is the identity.

use rand::Rng as _;

use crate::rng;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn identity(len: usize) -> Self {
        DropoutMask {
            keep: vec![true; len],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Tensor4) -> Tensor4 {
        let mut out = x.clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&self.keep) {
            *v = if k { *v * self.scale } else { 0.0 };
        }
        out
    }

    /// The backward pass is the same masked scaling.
    pub fn backward(&self, upstream: &Tensor4) -> Tensor4 {
        self.apply(upstream)
    }
}

/// `p` is the probability of dropping an entry.
pub fn dropout_forward(x: &Tensor4, p: f64, seed: u64, training: bool) -> (Tensor4, DropoutMask) {
    assert!((0.0..1.0).contains(&p), "drop probability {p} outside [0, 1)");
    if !training || p == 0.0 {
        return (x.clone(), DropoutMask::identity(x.len()));
    }
    let mut r = rng::seeded(seed);
    let mask = DropoutMask {
        keep: (0..x.len()).map(|_| r.random::<f64>() >= p).collect(),
        scale: 1.0 / (1.0 - p),
    };
    (mask.apply(x), mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_and_inference_are_identity() {
        let x = Tensor4::from_fn([1, 3, 3, 2], |[_, h, w, c]| (h * 6 + w * 2 + c) as f64);
        let (y, m) = dropout_forward(&x, 0.0, 1, true);
        assert_eq!(y, x);
        assert!(m.keep.iter().all(|&k| k));
        let (y, _) = dropout_forward(&x, 0.9, 1, false);
        assert_eq!(y, x);
    }

    #[test]
    fn survivors_are_rescaled() {
        let x = Tensor4::filled([1, 10, 10, 1], 2.0);
        let (y, m) = dropout_forward(&x, 0.5, 3, true);
        for (v, k) in y.data().iter().zip(&m.keep) {
            assert_eq!(*v, if *k { 4.0 } else { 0.0 });
        }
    }

    #[test]
    fn survivor_fraction_is_binomial() {
        let n = 1_000_000;
        for &p in &[0.1, 0.5, 0.9] {
            let x = Tensor4::filled([1, 1, 1, n], 1.0);
            let (_, m) = dropout_forward(&x, p, 42, true);
            let kept = m.keep.iter().filter(|&&k| k).count() as f64;
            let mean = n as f64 * (1.0 - p);
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((kept - mean).abs() < 3.0 * sd, "p={p}: kept {kept}, expected {mean} ± {sd}");
        }
    }
}
