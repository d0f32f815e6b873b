use crate::error::{Error, Result};
use crate::tensor::{finish, Tensor};

use super::ParamStore;

const ADAGRAD_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// SGD with Nesterov momentum.
    Nesterov { momentum: f64 },
    AdaGrad,
}

/// Learning-rate multiplier as a function of the epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` at every milestone epoch reached.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// `(1 − epoch/total)^power`.
    Poly { power: f64, total: usize },
    /// Half-cosine from 1 down to 0 over `total` epochs.
    Cosine { total: usize },
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Step { milestones, gamma } => {
                let k = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(k as i32)
            }
            Schedule::Poly { power, total } => {
                let t = (epoch as f64 / (*total).max(1) as f64).min(1.0);
                base * (1.0 - t).powf(*power)
            }
            Schedule::Cosine { total } => {
                let t = (epoch as f64 / (*total).max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// First-order optimizer over the trainable entries of a [`ParamStore`].
/// Slot `i` of the state belongs to parameter `i` of the store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    state: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        if let OptimizerKind::Nesterov { momentum } = kind {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            state: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update using the gradients stored in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.state.len() < store.params().len() {
            self.state.resize(store.params().len(), None);
        }
        let (lr, wd) = (self.lr, self.weight_decay);
        for (p, slot) in store.params_mut().iter_mut().zip(&mut self.state) {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let buf = slot.get_or_insert_with(|| vec![0.0; n]);
            let decay = if p.decay { wd } else { 0.0 };
            let mut next = p.value.data().to_vec();
            let grad = p.grad.data();
            match self.kind {
                OptimizerKind::Nesterov { momentum } => {
                    for i in 0..n {
                        let g = grad[i] + decay * next[i];
                        buf[i] = momentum * buf[i] + g;
                        next[i] -= lr * (g + momentum * buf[i]);
                    }
                }
                OptimizerKind::AdaGrad => {
                    for i in 0..n {
                        let g = grad[i] + decay * next[i];
                        buf[i] += g * g;
                        next[i] -= lr * g / (buf[i].sqrt() + ADAGRAD_EPS);
                    }
                }
            }
            p.value = Tensor::new(p.value.shape(), finish(next)).expect("same length");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(Shape::new(1, 1, 1, 3), value), true);
        s.get_mut(id).grad = Tensor::full(Shape::new(1, 1, 1, 3), grad);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store_with(0.3, 0.0);
        let before = s.clone();
        let mut opt = Optimizer::new(OptimizerKind::Nesterov { momentum: 0.9 }, 0.1, 0.0).unwrap();
        for _ in 0..3 {
            opt.step(&mut s);
        }
        assert_eq!(s, before);
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = store_with(0.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Nesterov { momentum: 0.0 }, 0.1, 0.0).unwrap();
        opt.step(&mut s);
        assert!(s.params()[0].value.data().iter().all(|&v| (v + 0.1).abs() < 1e-15));
    }

    #[test]
    fn nesterov_matches_hand_iteration() {
        let (m, lr, wd) = (0.9, 0.05, 0.01);
        let mut s = store_with(1.0, 0.5);
        let mut opt = Optimizer::new(OptimizerKind::Nesterov { momentum: m }, lr, wd).unwrap();
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..4 {
            opt.step(&mut s);
            let g = 0.5 + wd * p;
            v = m * v + g;
            p -= lr * (g + m * v);
        }
        assert!((s.params()[0].value.data()[0] - p).abs() < 1e-14);
    }

    #[test]
    fn adagrad_steps_shrink_under_constant_gradient() {
        let mut s = store_with(0.0, 0.7);
        let mut opt = Optimizer::new(OptimizerKind::AdaGrad, 0.01, 0.0).unwrap();
        let mut last = f64::INFINITY;
        let mut prev = 0.0;
        for _ in 0..20 {
            opt.step(&mut s);
            let now = s.params()[0].value.data()[0];
            let step = (now - prev).abs();
            assert!(step <= last);
            last = step;
            prev = now;
        }
    }

    #[test]
    fn negative_learning_rate_rejected() {
        assert!(matches!(Optimizer::new(OptimizerKind::AdaGrad, -0.1, 0.0), Err(Error::Config(_))));
        assert!(Optimizer::new(OptimizerKind::AdaGrad, 0.0, 0.0).is_ok());
    }

    #[test]
    fn step_schedule_milestones() {
        let s = Schedule::Step {
            milestones: vec![300, 350],
            gamma: 0.1,
        };
        assert_eq!(s.lr(0.2, 299), 0.2);
        assert!((s.lr(0.2, 300) - 0.02).abs() < 1e-15);
        assert!((s.lr(0.2, 350) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn poly_and_cosine_endpoints() {
        let p = Schedule::Poly { power: 0.9, total: 10 };
        assert_eq!(p.lr(1.0, 0), 1.0);
        assert_eq!(p.lr(1.0, 10), 0.0);
        let c = Schedule::Cosine { total: 10 };
        assert_eq!(c.lr(1.0, 0), 1.0);
        assert!((c.lr(1.0, 5) - 0.5).abs() < 1e-15);
        assert!(c.lr(1.0, 10).abs() < 1e-15);
    }
}
