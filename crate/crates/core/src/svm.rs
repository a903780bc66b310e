//! One-vs-all linear classifier trained with the squared hinge loss
//!
//! ```text
//! loss(x, y) = λ/2 |W|² + Σ_j max(0, 1 - y_j s_j)²,   s = W x + b,   λ = 2 / (N C)
//! ```
//!
//! where `y` is ±1 coded with a single +1, `N` is the training-set size and
//! `C` the regularization constant. Biases are not regularized.

use crate::error::{Error, Result};

pub const DEFAULT_C: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmParams {
    /// `m x d_FV` row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
    pub c: f64,
    /// Training-set size `N` entering `λ`.
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// ±1 label vector with +1 at `label`.
pub fn encode_label(label: usize, classes: usize) -> Vec<f64> {
    (0..classes).map(|j| if j == label { 1.0 } else { -1.0 }).collect()
}

fn check_label(y: &[f64], classes: usize) -> Result<()> {
    let positives = y.iter().filter(|&&v| v == 1.0).count();
    let negatives = y.iter().filter(|&&v| v == -1.0).count();
    if y.len() != classes || positives != 1 || positives + negatives != classes {
        return Err(Error::Validation(format!(
            "label vector must hold one +1 and {} entries of -1, got {y:?}",
            classes.saturating_sub(1)
        )));
    }
    Ok(())
}

impl SvmParams {
    pub fn zeros(classes: usize, dim: usize, c: f64, n_train: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        if !(c > 0.0) || n_train == 0 {
            return Err(Error::config("C and the training-set size must be positive"));
        }
        Ok(SvmParams {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            classes,
            dim,
            c,
            n_train,
        })
    }

    pub fn lambda(&self) -> f64 {
        2.0 / (self.n_train as f64 * self.c)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape(format!("{}-dim input to {}-dim classifier", x.len(), self.dim)));
        }
        Ok((0..self.classes)
            .map(|j| self.bias[j] + self.row(j).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    fn regularizer(&self) -> f64 {
        0.5 * self.lambda() * self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Sum of squared hinge terms only.
    pub fn data_term(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_label(y, self.classes)?;
        let s = self.scores(x)?;
        Ok(s.iter().zip(y).map(|(sj, yj)| (1.0 - yj * sj).max(0.0).powi(2)).sum())
    }

    pub fn loss(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.regularizer() + self.data_term(x, y)?)
    }

    pub fn loss_backward(&self, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, SvmGrads)> {
        check_label(y, self.classes)?;
        let s = self.scores(x)?;
        let lambda = self.lambda();
        let mut dx = vec![0.0; self.dim];
        let mut dw: Vec<f64> = self.weights.iter().map(|w| lambda * w).collect();
        let mut db = vec![0.0; self.classes];
        for j in 0..self.classes {
            let ds = -2.0 * (1.0 - y[j] * s[j]).max(0.0) * y[j];
            if ds == 0.0 {
                continue;
            }
            db[j] = ds;
            for ((g, xi), (dxi, wi)) in dw[j * self.dim..(j + 1) * self.dim]
                .iter_mut()
                .zip(x)
                .zip(dx.iter_mut().zip(self.row(j)))
            {
                *g += ds * xi;
                *dxi += ds * wi;
            }
        }
        Ok((dx, SvmGrads { weights: dw, bias: db }))
    }
}

/// Argmax of the mean score vector; ties go to the lowest class index.
pub fn predict(score_vectors: &[Vec<f64>]) -> Result<usize> {
    let first = score_vectors
        .first()
        .ok_or_else(|| Error::Validation("cannot predict from zero score vectors".into()))?;
    let mean = average_scores(score_vectors)?;
    debug_assert_eq!(mean.len(), first.len());
    Ok(argmax(&mean))
}

pub fn average_scores(score_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = score_vectors.first().map_or(0, Vec::len);
    if score_vectors.iter().any(|s| s.len() != m) {
        return Err(Error::shape("score vectors of different lengths"));
    }
    let mut mean = vec![0.0; m];
    for s in score_vectors {
        for (a, v) in mean.iter_mut().zip(s) {
            *a += v;
        }
    }
    let n = score_vectors.len() as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    Ok(mean)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SvmTrainConfig {
    pub c: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Stop early once the objective improves by less than this.
    pub plateau: f64,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        SvmTrainConfig {
            c: DEFAULT_C,
            epochs: 200,
            learning_rate: 0.5,
            momentum: 0.9,
            plateau: 1e-9,
        }
    }
}

/// Full-batch gradient descent with momentum on the mean per-sample loss.
/// Returns the parameters and the objective after every epoch.
pub fn train_svm(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &SvmTrainConfig,
) -> Result<(SvmParams, Vec<f64>)> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::config("classifier training needs matching, nonempty features and labels"));
    }
    let dim = features[0].len();
    let mut params = SvmParams::zeros(classes, dim, cfg.c, features.len())?;
    let targets: Vec<Vec<f64>> = labels.iter().map(|&l| encode_label(l, classes)).collect();
    let n = features.len() as f64;
    let mut vel_w = vec![0.0; params.weights.len()];
    let mut vel_b = vec![0.0; classes];
    let mut history: Vec<f64> = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; params.weights.len()];
        let mut gb = vec![0.0; classes];
        let mut objective = 0.0;
        for (x, y) in features.iter().zip(&targets) {
            objective += params.loss(x, y)?;
            let (_, g) = params.loss_backward(x, y)?;
            for (a, b) in gw.iter_mut().zip(&g.weights) {
                *a += b;
            }
            for (a, b) in gb.iter_mut().zip(&g.bias) {
                *a += b;
            }
        }
        objective /= n;
        if let Some(&prev) = history.last() {
            if (prev - objective).abs() < cfg.plateau {
                history.push(objective);
                break;
            }
        }
        history.push(objective);
        for ((p, v), g) in params.weights.iter_mut().zip(&mut vel_w).zip(&gw) {
            *v = cfg.momentum * *v - cfg.learning_rate * g / n;
            *p += *v;
        }
        for ((p, v), g) in params.bias.iter_mut().zip(&mut vel_b).zip(&gb) {
            *v = cfg.momentum * *v - cfg.learning_rate * g / n;
            *p += *v;
        }
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_svm(m: usize, d: usize, seed: u64) -> SvmParams {
        let mut r = rng::seeded(seed);
        let mut p = SvmParams::zeros(m, d, 1.0, 10).unwrap();
        p.weights.iter_mut().for_each(|w| *w = r.random_range(-1.0..1.0));
        p.bias.iter_mut().for_each(|b| *b = r.random_range(-1.0..1.0));
        p
    }

    fn random_vec(d: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn score_examples() {
        let p = SvmParams::zeros(3, 4, 1.0, 1).unwrap();
        assert_eq!(p.scores(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
        let q = random_svm(3, 4, 1);
        assert_eq!(q.scores(&[0.0; 4]).unwrap(), q.bias);
        let x = random_vec(4, 2);
        let s = q.scores(&x).unwrap();
        for j in 0..3 {
            let mut naive = q.bias[j];
            for i in 0..4 {
                naive += q.weights[j * 4 + i] * x[i];
            }
            assert!((s[j] - naive).abs() < 1e-12);
        }
        assert!(q.scores(&[0.0; 3]).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = SvmParams::zeros(4, 3, 1.0, 5).unwrap();
        let y = encode_label(2, 4);
        assert_eq!(p.data_term(&[0.3, 0.1, 0.2], &y).unwrap(), 4.0);

        let mut q = SvmParams::zeros(3, 2, 2.0, 4).unwrap();
        q.weights = vec![2.0, 0.0, -2.0, 0.0, -2.0, 0.0];
        let x = [1.0, 0.5];
        let y = encode_label(0, 3);
        assert_eq!(q.data_term(&x, &y).unwrap(), 0.0);
        let reg = 0.5 * (2.0 / 8.0) * 12.0;
        assert!((q.loss(&x, &y).unwrap() - reg).abs() < 1e-15);

        let r = random_svm(4, 6, 3);
        let x = random_vec(6, 4);
        let y = encode_label(1, 4);
        let s = r.scores(&x).unwrap();
        let direct = 0.5 * r.lambda() * r.weights.iter().map(|w| w * w).sum::<f64>()
            + (0..4).map(|j| f64::max(0.0, 1.0 - y[j] * s[j]).powi(2)).sum::<f64>();
        assert!((r.loss(&x, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn malformed_labels() {
        let p = SvmParams::zeros(3, 2, 1.0, 1).unwrap();
        assert!(p.loss(&[0.0, 0.0], &[1.0, 1.0, -1.0]).is_err());
        assert!(p.loss(&[0.0, 0.0], &[1.0, 0.0, -1.0]).is_err());
        assert!(p.loss(&[0.0, 0.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn satisfied_margins_leave_only_regularizer() {
        let mut q = SvmParams::zeros(2, 2, 1.0, 2).unwrap();
        q.weights = vec![3.0, 0.0, -3.0, 0.0];
        let (dx, g) = q.loss_backward(&[1.0, 0.0], &encode_label(0, 2)).unwrap();
        assert_eq!(dx, vec![0.0, 0.0]);
        let lambda = q.lambda();
        assert_eq!(g.weights, q.weights.iter().map(|w| lambda * w).collect::<Vec<_>>());
        assert_eq!(g.bias, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_vanishes_at_the_kink() {
        let mut q = SvmParams::zeros(2, 1, 1.0, 1).unwrap();
        q.weights = vec![1.0, -1.0];
        let (dx, g) = q.loss_backward(&[1.0], &encode_label(0, 2)).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(g.bias, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_difference_check() {
        let p = random_svm(4, 10, 5);
        let x = random_vec(10, 6);
        let y = encode_label(3, 4);
        let (dx, g) = p.loss_backward(&x, &y).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for i in 0..10 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[i] += h;
            b[i] -= h;
            let num = (p.loss(&a, &y).unwrap() - p.loss(&b, &y).unwrap()) / (2.0 * h);
            assert!(rel(dx[i], num) < 1e-6);
        }
        for i in 0..40 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.weights[i] += h;
            b.weights[i] -= h;
            let num = (a.loss(&x, &y).unwrap() - b.loss(&x, &y).unwrap()) / (2.0 * h);
            assert!(rel(g.weights[i], num) < 1e-6);
        }
        for i in 0..4 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.bias[i] += h;
            b.bias[i] -= h;
            let num = (a.loss(&x, &y).unwrap() - b.loss(&x, &y).unwrap()) / (2.0 * h);
            assert!(rel(g.bias[i], num) < 1e-6);
        }
    }

    #[test]
    fn loss_is_midpoint_convex() {
        let x = random_vec(5, 7);
        let y = encode_label(1, 3);
        for seed in 0..50 {
            let a = random_svm(3, 5, 100 + seed);
            let b = random_svm(3, 5, 200 + seed);
            let mut mid = a.clone();
            for (m, (u, v)) in mid.weights.iter_mut().zip(a.weights.iter().zip(&b.weights)) {
                *m = 0.5 * (u + v);
            }
            for (m, (u, v)) in mid.bias.iter_mut().zip(a.bias.iter().zip(&b.bias)) {
                *m = 0.5 * (u + v);
            }
            let lm = mid.loss(&x, &y).unwrap();
            let avg = 0.5 * (a.loss(&x, &y).unwrap() + b.loss(&x, &y).unwrap());
            assert!(lm <= avg + 1e-12);
        }
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&[vec![0.1, 0.9]]).unwrap(), 1);
        assert_eq!(predict(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), 0);
        assert!(predict(&[]).is_err());
        let mut r = rng::seeded(8);
        for _ in 0..100 {
            let vs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            let sum: Vec<f64> = (0..4).map(|j| vs.iter().map(|v| v[j]).sum()).collect();
            assert_eq!(predict(&vs).unwrap(), argmax(&sum));
            let shift: Vec<f64> = (0..4).map(|_| r.random_range(-5.0..5.0)).collect();
            let shifted: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let mean: Vec<f64> = sum.iter().zip(&shift).map(|(s, b)| s / 3.0 + b).collect();
            assert_eq!(predict(&shifted).unwrap(), argmax(&mean));
        }
    }

    #[test]
    fn predict_ignores_a_common_offset() {
        let vs = vec![vec![0.2, 0.5, -0.1], vec![0.4, 0.1, 0.3]];
        let shifted: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|a| a + 7.0).collect()).collect();
        assert_eq!(predict(&vs).unwrap(), predict(&shifted).unwrap());
    }

    #[test]
    fn training_separates_easy_data() {
        let mut r = rng::seeded(9);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let l = i % 3;
            let mut v: Vec<f64> = (0..6).map(|_| r.random_range(-0.2..0.2)).collect();
            v[l] += 1.0;
            feats.push(v);
            labels.push(l);
        }
        let (p, hist) = train_svm(&feats, &labels, 3, &SvmTrainConfig::default()).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        let correct = feats
            .iter()
            .zip(&labels)
            .filter(|(x, l)| argmax(&p.scores(x).unwrap()) == **l)
            .count();
        assert_eq!(correct, 60);
    }
}
