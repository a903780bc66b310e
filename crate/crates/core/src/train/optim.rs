//! First-order update rules, applied in place.

/// `v <- momentum·v - lr·g`, then `p <- p + v`.
pub fn sgd_momentum_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

pub const ADAGRAD_EPS: f64 = 1e-8;

/// `a <- a + g²`, then `p <- p - lr·g / (sqrt(a) + eps)`.
pub fn adagrad_step(param: &mut [f64], grad: &[f64], accum: &mut [f64], lr: f64, eps: f64) {
    for ((p, g), a) in param.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adagrad,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adagrad => "adagrad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd_momentum" => Some(OptimizerKind::SgdMomentum),
            "adagrad" => Some(OptimizerKind::Adagrad),
            _ => None,
        }
    }
}

/// One state slot (velocity or squared-gradient sum) per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub slots: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, group_sizes: &[usize]) -> Self {
        OptimizerState {
            kind,
            slots: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, group: usize, param: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
        let slot = &mut self.slots[group];
        match self.kind {
            OptimizerKind::SgdMomentum => sgd_momentum_step(param, grad, slot, lr, momentum),
            OptimizerKind::Adagrad => adagrad_step(param, grad, slot, lr, ADAGRAD_EPS),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_descent() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_momentum_step(&mut p, &[0.5, 0.25], &mut v, 1.0, 0.0);
        assert_eq!(p, [0.5, -2.25]);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut p = [0.0];
        let mut v = [2.0];
        sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.9);
        assert_eq!(v, [0.9 * 2.0]);
        assert_eq!(p, [0.9 * 2.0]);
    }

    #[test]
    fn two_momentum_steps_by_hand() {
        let (lr, mu) = (0.1, 0.9);
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut p, &[2.0], &mut v, lr, mu);
        sgd_momentum_step(&mut p, &[-1.0], &mut v, lr, mu);
        let v1 = -lr * 2.0;
        let p1 = 1.0 + v1;
        let v2 = mu * v1 - lr * -1.0;
        let p2 = p1 + v2;
        assert_eq!((p[0], v[0]), (p2, v2));
    }

    #[test]
    fn adagrad_first_step() {
        let mut p = [0.0];
        let mut a = [0.0];
        adagrad_step(&mut p, &[1.0], &mut a, 0.1, ADAGRAD_EPS);
        assert_eq!(p[0], -0.1 / (1.0 + ADAGRAD_EPS));
        assert_eq!(a[0], 1.0);
        let before = p;
        adagrad_step(&mut p, &[0.0], &mut a, 0.1, ADAGRAD_EPS);
        assert_eq!(p, before);
    }

    #[test]
    fn adagrad_three_steps_by_hand() {
        let (lr, eps) = (0.05, ADAGRAD_EPS);
        let grads = [0.3, -0.7, 0.2];
        let mut p = [0.4];
        let mut a = [0.0];
        for g in grads {
            adagrad_step(&mut p, &[g], &mut a, lr, eps);
        }
        let mut hp = 0.4f64;
        let mut ha = 0.0f64;
        for g in grads {
            ha += g * g;
            hp -= lr * g / (ha.sqrt() + eps);
        }
        assert!((p[0] - hp).abs() < 1e-15);
    }
}
